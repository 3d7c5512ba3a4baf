mod common;

use common::{random_img, terms, AIR_C};
use ctxlate::evaluation::{self_ssim, ssim};
use ctxlate::layers::{Activation, Normalization, PadMode};
use ctxlate::losses::{loss_air, loss_grad};
use ctxlate::networks::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use ctxlate::phantom::{degrade_to_cbct, generate_truth, DegradationSpec, PhantomSpec};
use ctxlate::preprocess::{body_masks, clip_and_scale_value, masked_scaled_slices, otsu_threshold, MaskMode, OTSU_BINS};
use ctxlate::trainer::{failure_check, lr_schedule, TrainConfig, Verdict};
use ctxlate::volume::{load_volume, save_volume, CtVolume, Modality};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_loss_term_is_non_negative(seed in any::<u64>(), h in 3usize..9, w in 3usize..9) {
        let mut r = rng(seed);
        for term in terms() {
            let args: Vec<_> = (0..term.arity).map(|_| random_img(&mut r, h, w).mapv(|v| v * 3.0)).collect();
            prop_assert!((term.value)(&args) >= 0.0, "{}", term.name);
        }
    }

    #[test]
    fn air_loss_ignores_changes_above_the_threshold(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let mut r = rng(seed);
        let args: Vec<_> = (0..4).map(|_| random_img(&mut r, h, w)).collect();
        let before = loss_air(args[0].view(), args[1].view(), args[2].view(), args[3].view(), AIR_C).unwrap();
        let changed: Vec<_> = args
            .iter()
            .map(|a| a.mapv(|v| if v >= AIR_C { r.random_range(AIR_C..2.0) } else { v }))
            .collect();
        let after = loss_air(changed[0].view(), changed[1].view(), changed[2].view(), changed[3].view(), AIR_C).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn grad_loss_ignores_a_global_offset(seed in any::<u64>(), h in 3usize..9, w in 3usize..9, k in -5.0f64..5.0) {
        let mut r = rng(seed);
        let a: Vec<_> = (0..4).map(|_| random_img(&mut r, h, w)).collect();
        let before = loss_grad(a[0].view(), a[1].view(), a[2].view(), a[3].view()).unwrap();
        let shifted = a[1].mapv(|v| v + k);
        let after = loss_grad(a[0].view(), shifted.view(), a[2].view(), a[3].view()).unwrap();
        prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0), "{before} vs {after}");
    }

    #[test]
    fn clip_and_scale_is_monotone_and_idempotent(a in -3000.0f64..3000.0, b in -3000.0f64..3000.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(clip_and_scale_value(lo) <= clip_and_scale_value(hi));
        let v = clip_and_scale_value(a);
        prop_assert!((-1.0..=1.0).contains(&v));
        prop_assert_eq!(clip_and_scale_value(a.clamp(-500.0, 200.0)), v);
    }

    #[test]
    fn lr_schedule_is_non_increasing_and_bounded(constant in 1usize..30, decay in 1usize..30) {
        let cfg = TrainConfig { epochs_constant: constant, epochs_decay: decay, ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        for e in 0..=constant + decay {
            let lr = lr_schedule(e, &cfg).unwrap();
            prop_assert!(lr <= prev && (0.0..=cfg.base_lr).contains(&lr));
            prev = lr;
        }
        prop_assert_eq!(prev, 0.0);
    }

    #[test]
    fn failure_check_threshold(reference in 1e-6f64..10.0, ratio in 0.0f64..6.0) {
        let verdict = failure_check(ratio * reference, reference).unwrap();
        prop_assert_eq!(verdict == Verdict::Suspect, ratio * reference > 3.0 * reference);
    }

    #[test]
    fn ssim_of_an_image_with_itself_is_one(seed in any::<u64>(), h in 11usize..24, w in 11usize..24) {
        let img = random_img(&mut rng(seed), h, w).mapv(|v| 127.5 * (v + 1.0));
        prop_assert!((ssim(img.view(), img.view()).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(self_ssim(img.view()).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn otsu_matches_exhaustive_search(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (r.random_range(-1000.0..-300.0), r.random_range(-100.0..400.0));
        let slice = Array2::from_shape_simple_fn((24, 24), || {
            let centre: f64 = if r.random_bool(0.4) { a } else { b };
            (centre + r.random_range(-80.0..80.0)).round() as i16
        });
        let values: Vec<i16> = slice.iter().copied().collect();
        prop_assert_eq!(otsu_threshold(slice.view()).unwrap(), common::oracle_otsu(&values, OTSU_BINS));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn volume_round_trip_is_exact(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, d in 1usize..5) {
        let mut r = rng(seed);
        let voxels = Array3::from_shape_simple_fn((d, h, w), || r.random_range(-1024i16..=3071));
        let spacing = [r.random_range(0.1..3.0), r.random_range(0.1..3.0), r.random_range(0.5..5.0)];
        let vol = CtVolume::new(voxels, spacing, Modality::Cbct, format!("p{seed}")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_volume(&vol, dir.path().join("v")).unwrap();
        prop_assert_eq!(load_volume(dir.path().join("v")).unwrap(), vol);
    }

    #[test]
    fn pipeline_values_and_background(seed in any::<u64>()) {
        let truth = generate_truth(&PhantomSpec::pelvis("p", [48, 56], 2, seed)).unwrap();
        let cbct = degrade_to_cbct(&truth, &DegradationSpec { seed, ..DegradationSpec::default() }).unwrap();
        for vol in [&truth.volume, &cbct] {
            for mode in [MaskMode::PerSlice, MaskMode::PerVolume] {
                let masks = body_masks(vol, mode).unwrap();
                for (s, m) in masked_scaled_slices(vol, mode).unwrap().iter().zip(&masks) {
                    prop_assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
                    for (v, inside) in s.iter().zip(m.mask.iter()) {
                        if !inside {
                            prop_assert_eq!(*v, -1.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn degradation_keeps_the_air_set(seed in any::<u64>()) {
        let truth = generate_truth(&PhantomSpec::pelvis("p", [48, 56], 2, seed)).unwrap();
        let cbct = degrade_to_cbct(&truth, &DegradationSpec { seed: seed ^ 1, ..DegradationSpec::default() }).unwrap();
        for (t, c) in truth.volume.voxels().iter().zip(cbct.voxels().iter()) {
            prop_assert_eq!(*t < -465, *c < -465);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn networks_preserve_and_shrink_shapes(seed in any::<u64>(), hb in 1usize..6, wb in 1usize..6) {
        let (h, w) = (8 * hb, 8 * wb);
        let mut r = rng(seed);
        let g = Generator::new(
            GeneratorSpec { stem_channels: 2, down_channels: vec![2, 3, 4], residual_blocks: 1, noise_after_block: 0, ..GeneratorSpec::default() },
            &mut r,
        )
        .unwrap();
        let mut dspec = DiscriminatorSpec::default();
        for l in dspec.layers.iter_mut() {
            l.out_channels = l.out_channels.min(2);
        }
        let d = Discriminator::new(dspec, &mut r).unwrap();
        let x = random_img(&mut r, h, w).mapv(|v| v as f32).insert_axis(ndarray::Axis(0));
        prop_assert_eq!(g.forward(&x).unwrap().dim(), (1, h, w));
        prop_assert_eq!(d.forward(&x).unwrap().dim(), (1, h / 8, w / 8));
    }
}

/// Input interval `[lo, hi]` seen by output position `p` along one axis of
/// length `n`, composing the layers from the output back to the input.
fn covered(p: usize, n: usize, layers: &[(usize, usize)]) -> (i64, i64) {
    let mut sizes = vec![n];
    for &(_, s) in layers {
        sizes.push(sizes.last().unwrap().div_ceil(s));
    }
    let (mut lo, mut hi) = (p as i64, p as i64);
    for (l, &(k, s)) in layers.iter().enumerate().rev() {
        let total = (((sizes[l + 1] - 1) * s + k) as i64 - sizes[l] as i64).max(0);
        let before = total / 2;
        lo = lo * s as i64 - before;
        hi = hi * s as i64 - before + k as i64 - 1;
    }
    (lo, hi)
}

#[test]
fn receptive_field_matches_a_perturbation_probe() {
    let mut spec = DiscriminatorSpec::default();
    spec.pad = PadMode::Constant(0.0);
    spec.init_sd = 0.5;
    for l in spec.layers.iter_mut() {
        l.out_channels = l.out_channels.min(2);
        l.normalization = Normalization::None;
        if l.activation == Activation::None {
            continue;
        }
        l.activation = Activation::LeakyRelu(0.2);
    }
    let layers = spec.kernel_strides();
    let d = Discriminator::new(spec, &mut rng(3)).unwrap();
    let (h, w) = (88usize, 96usize);
    let x = random_img(&mut rng(4), h, w).mapv(|v| v as f32).insert_axis(ndarray::Axis(0));
    let base = d.forward(&x).unwrap();
    for (pr, pc) in [(0usize, 0usize), (40, 50), (87, 95), (13, 70)] {
        let mut xp = x.clone();
        xp[[0, pr, pc]] += 1.0;
        let out = d.forward(&xp).unwrap();
        for ((_, i, j), (&a, &b)) in base.indexed_iter().map(|(idx, _)| idx).zip(base.iter().zip(out.iter())) {
            let (r0, r1) = covered(i, h, &layers);
            let (c0, c1) = covered(j, w, &layers);
            assert_eq!(r1 - r0 + 1, 73);
            let inside = (r0..=r1).contains(&(pr as i64)) && (c0..=c1).contains(&(pc as i64));
            assert_eq!(a != b, inside, "pixel ({pr},{pc}) output ({i},{j})");
        }
    }
}
