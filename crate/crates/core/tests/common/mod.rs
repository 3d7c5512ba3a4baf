//! Independent reference implementations shared by the integration suites.
//!
//! Everything here works on plain nested vectors with explicit loops so that
//! it shares no code with the library.
#![allow(dead_code)]

use ctxlate::losses::{
    loss_adversarial_g, loss_adversarial_g_grad, loss_air, loss_air_grad, loss_cycle, loss_cycle_grad,
    loss_discriminator, loss_discriminator_grad, loss_grad, loss_grad_grad, loss_idem, loss_idem_grad, loss_tv,
    loss_tv_grad, LossWeights,
};
use ndarray::Array2;
use rand::Rng;

pub type Img = Array2<f64>;
pub type Rows = Vec<Vec<f64>>;

/// `clip_and_scale(-465 HU)` written out.
pub const AIR_C: f64 = (-465.0 + 150.0) / 350.0;

pub fn rows(img: &Img) -> Rows {
    img.outer_iter().map(|r| r.to_vec()).collect()
}

fn n_pixels(a: &Rows) -> f64 {
    (a.len() * a[0].len()) as f64
}

pub fn oracle_mean_abs(a: &Rows, b: &Rows) -> f64 {
    let mut s = 0.0;
    for r in 0..a.len() {
        for c in 0..a[0].len() {
            s += (a[r][c] - b[r][c]).abs();
        }
    }
    s / n_pixels(a)
}

pub fn oracle_mse(a: &Rows, target: f64) -> f64 {
    let mut s = 0.0;
    for row in a {
        for v in row {
            s += (v - target) * (v - target);
        }
    }
    s / n_pixels(a)
}

pub fn oracle_tv(a: &Rows) -> f64 {
    let (h, w) = (a.len(), a[0].len());
    let mut s = 0.0;
    let mut n = 0usize;
    for r in 0..h {
        for c in 0..w - 1 {
            s += (a[r][c + 1] - a[r][c]).abs();
            n += 1;
        }
    }
    for r in 0..h - 1 {
        for c in 0..w {
            s += (a[r + 1][c] - a[r][c]).abs();
            n += 1;
        }
    }
    s / n as f64
}

fn oracle_psi(v: f64) -> f64 {
    if v < AIR_C {
        v
    } else {
        0.0
    }
}

fn oracle_air_pair(a: &Rows, ga: &Rows) -> f64 {
    let mut s = 0.0;
    for r in 0..a.len() {
        for c in 0..a[0].len() {
            s += (oracle_psi(ga[r][c]) - oracle_psi(a[r][c])).abs();
        }
    }
    s / n_pixels(a)
}

/// Mirror an out-of-range index by one step without repeating the edge.
fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    if i < 0 {
        (-i) as usize
    } else if i >= n {
        (2 * (n - 1) - i) as usize
    } else {
        i as usize
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn correlate3(a: &Rows, k: &[[f64; 3]; 3]) -> Rows {
    let (h, w) = (a.len(), a[0].len());
    let mut out = vec![vec![0.0; w]; h];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (i, krow) in k.iter().enumerate() {
                for (j, kv) in krow.iter().enumerate() {
                    s += kv * a[mirror(r as i64 + i as i64 - 1, h)][mirror(c as i64 + j as i64 - 1, w)];
                }
            }
            out[r][c] = s;
        }
    }
    out
}

pub fn oracle_sobel(a: &Rows) -> (Rows, Rows) {
    (correlate3(a, &SOBEL_X), correlate3(a, &SOBEL_Y))
}

fn oracle_grad_pair(a: &Rows, ga: &Rows) -> f64 {
    let diff: Rows = a.iter().zip(ga).map(|(r, g)| r.iter().zip(g).map(|(x, y)| x - y).collect()).collect();
    let (d1, d2) = oracle_sobel(&diff);
    oracle_mse(&d1, 0.0) + oracle_mse(&d2, 0.0)
}

/// One loss term with its library value, oracle value and gradients.
pub struct Term {
    pub name: &'static str,
    pub arity: usize,
    /// Smallest image side the term accepts.
    pub min_side: usize,
    pub value: fn(&[Img]) -> f64,
    pub oracle: fn(&[Rows]) -> f64,
    /// Library gradient for each argument; `None` where the term exposes none.
    pub grad: fn(&[Img]) -> Vec<Option<Img>>,
    /// True when a finite-difference step of `h` could cross a point where
    /// the term is not differentiable.
    pub near_kink: fn(&[Img], f64) -> bool,
}

fn pairs_close(a: &Img, b: &Img, h: f64) -> bool {
    a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() < 2.0 * h)
}

fn never(_: &[Img], _: f64) -> bool {
    false
}

pub fn terms() -> Vec<Term> {
    vec![
        Term {
            name: "discriminator",
            arity: 4,
            min_side: 1,
            value: |a| loss_discriminator(a[0].view(), a[1].view(), a[2].view(), a[3].view(), &LossWeights::default()).unwrap(),
            oracle: |a| oracle_mse(&a[0], 0.0) + oracle_mse(&a[1], 1.0) + oracle_mse(&a[2], 0.0) + oracle_mse(&a[3], 1.0),
            grad: |a| {
                loss_discriminator_grad(a[0].view(), a[1].view(), a[2].view(), a[3].view(), &LossWeights::default())
                    .unwrap()
                    .into_iter()
                    .map(Some)
                    .collect()
            },
            near_kink: never,
        },
        Term {
            name: "cycle",
            arity: 4,
            min_side: 1,
            value: |a| {
                let (p, q) = loss_cycle(a[0].view(), a[1].view(), a[2].view(), a[3].view()).unwrap();
                p + q
            },
            oracle: |a| oracle_mean_abs(&a[0], &a[1]) + oracle_mean_abs(&a[2], &a[3]),
            grad: |a| {
                let (gx, gy) = loss_cycle_grad(a[0].view(), a[1].view(), a[2].view(), a[3].view()).unwrap();
                vec![None, Some(gx), None, Some(gy)]
            },
            near_kink: |a, h| pairs_close(&a[0], &a[1], h) || pairs_close(&a[2], &a[3], h),
        },
        Term {
            name: "adversarial",
            arity: 2,
            min_side: 1,
            value: |a| loss_adversarial_g(a[0].view(), a[1].view()),
            oracle: |a| oracle_mse(&a[0], 1.0) + oracle_mse(&a[1], 1.0),
            grad: |a| {
                let (p, q) = loss_adversarial_g_grad(a[0].view(), a[1].view());
                vec![Some(p), Some(q)]
            },
            near_kink: never,
        },
        Term {
            name: "tv",
            arity: 1,
            min_side: 2,
            value: |a| loss_tv(a[0].view()).unwrap(),
            oracle: |a| oracle_tv(&a[0]),
            grad: |a| vec![Some(loss_tv_grad(a[0].view()).unwrap())],
            near_kink: |a, h| {
                let (rows, cols) = a[0].dim();
                (0..rows).any(|r| {
                    (0..cols).any(|c| {
                        let v = a[0][[r, c]];
                        (c + 1 < cols && (a[0][[r, c + 1]] - v).abs() < 2.0 * h)
                            || (r + 1 < rows && (a[0][[r + 1, c]] - v).abs() < 2.0 * h)
                    })
                })
            },
        },
        Term {
            name: "air",
            arity: 4,
            min_side: 1,
            value: |a| loss_air(a[0].view(), a[1].view(), a[2].view(), a[3].view(), AIR_C).unwrap(),
            oracle: |a| oracle_air_pair(&a[0], &a[1]) + oracle_air_pair(&a[2], &a[3]),
            grad: |a| {
                let (dx, dgx, dy, dgy) = loss_air_grad(a[0].view(), a[1].view(), a[2].view(), a[3].view(), AIR_C).unwrap();
                vec![Some(dx), Some(dgx), Some(dy), Some(dgy)]
            },
            near_kink: |a, h| {
                a.iter().any(|img| img.iter().any(|v| (v - AIR_C).abs() < 2.0 * h))
                    || pairs_close(&a[0], &a[1], h)
                    || pairs_close(&a[2], &a[3], h)
            },
        },
        Term {
            name: "grad",
            arity: 4,
            min_side: 3,
            value: |a| loss_grad(a[0].view(), a[1].view(), a[2].view(), a[3].view()).unwrap(),
            oracle: |a| oracle_grad_pair(&a[0], &a[1]) + oracle_grad_pair(&a[2], &a[3]),
            grad: |a| {
                let (gx, gy) = loss_grad_grad(a[0].view(), a[1].view(), a[2].view(), a[3].view()).unwrap();
                vec![None, Some(gx), None, Some(gy)]
            },
            near_kink: never,
        },
        Term {
            name: "idem",
            arity: 4,
            min_side: 1,
            value: |a| loss_idem(a[0].view(), a[1].view(), a[2].view(), a[3].view()).unwrap(),
            oracle: |a| oracle_mean_abs(&a[0], &a[1]) + oracle_mean_abs(&a[2], &a[3]),
            grad: |a| {
                let (g0, g1, g2, g3) = loss_idem_grad(a[0].view(), a[1].view(), a[2].view(), a[3].view()).unwrap();
                vec![Some(g0), Some(g1), Some(g2), Some(g3)]
            },
            near_kink: |a, h| pairs_close(&a[0], &a[1], h) || pairs_close(&a[2], &a[3], h),
        },
    ]
}

/// Values on [-1, 1], half of them drawn from the air band below -0.8 so
/// that the air term sees both regimes.
pub fn random_img<R: Rng>(rng: &mut R, h: usize, w: usize) -> Img {
    Array2::from_shape_simple_fn((h, w), || {
        if rng.random_bool(0.5) {
            rng.random_range(-1.0..-0.8)
        } else {
            rng.random_range(-1.0..1.0)
        }
    })
}

/// Largest relative error between library and oracle over `cases` random
/// inputs of sizes from `min_side` up to 8x8.
pub fn oracle_max_rel_error<R: Rng>(term: &Term, cases: usize, rng: &mut R) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let h = rng.random_range(term.min_side..=8);
        let w = rng.random_range(term.min_side..=8);
        let args: Vec<Img> = (0..term.arity).map(|_| random_img(rng, h, w)).collect();
        let lib = (term.value)(&args);
        let reference = (term.oracle)(&args.iter().map(rows).collect::<Vec<_>>());
        let rel = (lib - reference).abs() / reference.abs().max(1e-12);
        worst = worst.max(if reference == 0.0 && lib == 0.0 { 0.0 } else { rel });
    }
    worst
}

/// Norm-wise relative error of the library gradients against central
/// differences of the library value, maximized over arguments.
pub fn gradient_rel_error(term: &Term, args: &[Img], step: f64) -> f64 {
    let analytic = (term.grad)(args);
    let mut worst = 0.0f64;
    for (k, g) in analytic.iter().enumerate() {
        let Some(g) = g else { continue };
        let mut numeric = Img::zeros(args[k].dim());
        for idx in 0..args[k].len() {
            let (r, c) = (idx / args[k].ncols(), idx % args[k].ncols());
            let mut plus = args.to_vec();
            let mut minus = args.to_vec();
            plus[k][[r, c]] += step;
            minus[k][[r, c]] -= step;
            numeric[[r, c]] = ((term.value)(&plus) - (term.value)(&minus)) / (2.0 * step);
        }
        let diff = (g - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = numeric.mapv(|v| v * v).sum().sqrt().max(g.mapv(|v| v * v).sum().sqrt());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// Random 4x4 arguments away from every non-differentiable point.
pub fn smooth_args<R: Rng>(term: &Term, step: f64, rng: &mut R) -> Vec<Img> {
    loop {
        let args: Vec<Img> = (0..term.arity).map(|_| random_img(rng, 4, 4)).collect();
        if !(term.near_kink)(&args, step) {
            return args;
        }
    }
}

/// Exhaustive Otsu search with the library's binning: every split point is
/// scored by partitioning the voxels directly.
pub fn oracle_otsu(values: &[i16], bins: usize) -> f64 {
    let lo = *values.iter().min().unwrap() as f64;
    let hi = *values.iter().max().unwrap() as f64;
    let width = (hi - lo) / bins as f64;
    let bin_of = |v: i16| -> usize {
        let b = ((v as f64 - lo) / width).floor();
        if b < 0.0 {
            0
        } else {
            (b as usize).min(bins - 1)
        }
    };
    let center = |b: usize| lo + (b as f64 + 0.5) * width;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for k in 0..bins - 1 {
        let (mut n0, mut n1, mut s0, mut s1) = (0.0, 0.0, 0.0, 0.0);
        for &v in values {
            let b = bin_of(v);
            if b <= k {
                n0 += 1.0;
                s0 += center(b);
            } else {
                n1 += 1.0;
                s1 += center(b);
            }
        }
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let n = n0 + n1;
        let between = (n0 / n) * (n1 / n) * (s0 / n0 - s1 / n1).powi(2);
        if between > best.0 {
            best = (between, k);
        }
    }
    lo + (best.1 as f64 + 1.0) * width
}
