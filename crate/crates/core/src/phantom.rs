//! Synthetic pelvic phantoms and their artifact-degraded CBCT counterparts.
//!
//! A phantom is a stack of identical-topology axial slices built from simple
//! shapes painted over a body ellipse. Each voxel carries a tissue label, so
//! evaluation can place ROIs exactly. The degraded copy keeps the air region
//! ({v < -465 HU}) identical to the truth by construction.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{default_radius, gaussian_kernel, separable_filter};
use crate::volume::{save_volume, CtVolume, Modality, AIR_HU, HU_MAX, HU_MIN};

/// Voxels below this value count as air everywhere in the pipeline.
pub const AIR_LIMIT_HU: f64 = -465.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tissue {
    Air,
    Fat,
    Muscle,
    Prostate,
    Bladder,
    Bone,
}

impl Tissue {
    /// Soft tissues with reference ROI statistics.
    pub const SOFT: [Tissue; 4] = [Tissue::Muscle, Tissue::Fat, Tissue::Prostate, Tissue::Bladder];

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Air => "air",
            Tissue::Fat => "fat",
            Tissue::Muscle => "muscle",
            Tissue::Prostate => "prostate",
            Tissue::Bladder => "bladder",
            Tissue::Bone => "bone",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned ellipse; `center` and `radii` are `(row, col)` in pixels.
    Ellipse { center: [f64; 2], radii: [f64; 2] },
    /// Segment from `start` to `end` thickened by `radius`.
    Capsule { start: [f64; 2], end: [f64; 2], radius: f64 },
}

impl Shape {
    /// Whether pixel center `(r, c)` lies inside the shape shrunk by `scale`
    /// about its own center.
    pub fn contains(&self, r: f64, c: f64, scale: f64) -> bool {
        match *self {
            Shape::Ellipse { center, radii } => {
                let y = (r - center[0]) / (radii[0] * scale);
                let x = (c - center[1]) / (radii[1] * scale);
                y * y + x * x <= 1.0
            }
            Shape::Capsule { start, end, radius } => {
                let (dy, dx) = (end[0] - start[0], end[1] - start[1]);
                let len2 = dy * dy + dx * dx;
                let t = if len2 > 0.0 {
                    (((r - start[0]) * dy + (c - start[1]) * dx) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (py, px) = (start[0] + t * dy - r, start[1] + t * dx - c);
                py * py + px * px <= (radius * scale) * (radius * scale)
            }
        }
    }

    /// Normalized elliptical radius of `(r, c)`: 0 at the center, 1 on the outline.
    fn rho(&self, r: f64, c: f64) -> f64 {
        match *self {
            Shape::Ellipse { center, radii } => {
                let y = (r - center[0]) / radii[0];
                let x = (c - center[1]) / radii[1];
                (y * y + x * x).sqrt()
            }
            Shape::Capsule { .. } => 0.0,
        }
    }

    fn center(&self) -> [f64; 2] {
        match *self {
            Shape::Ellipse { center, .. } => center,
            Shape::Capsule { start, end, .. } => [(start[0] + end[0]) / 2.0, (start[1] + end[1]) / 2.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub shape: Shape,
    pub tissue: Tissue,
    /// Half-open slice range `[first, last)`; all slices when absent.
    #[serde(default)]
    pub slices: Option<[usize; 2]>,
    /// Relative shrinkage at the ends of the stack (0 keeps the shape constant).
    #[serde(default)]
    pub taper: f64,
}

impl Region {
    fn scale_at(&self, k: usize, n_slices: usize) -> Option<f64> {
        if let Some([a, b]) = self.slices {
            if k < a || k >= b {
                return None;
            }
        }
        if n_slices <= 1 || self.taper == 0.0 {
            return Some(1.0);
        }
        let t = 2.0 * k as f64 / (n_slices - 1) as f64 - 1.0;
        Some(1.0 - self.taper * t * t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueStats {
    pub mean: f64,
    pub sd: f64,
}

/// Reference planning-CT statistics per tissue.
pub fn default_tissue_hu() -> BTreeMap<Tissue, TissueStats> {
    BTreeMap::from([
        (Tissue::Air, TissueStats { mean: -1000.0, sd: 0.0 }),
        (Tissue::Fat, TissueStats { mean: -104.0, sd: 13.0 }),
        (Tissue::Muscle, TissueStats { mean: 52.0, sd: 14.0 }),
        (Tissue::Prostate, TissueStats { mean: 33.0, sd: 23.0 }),
        (Tissue::Bladder, TissueStats { mean: 8.0, sd: 18.0 }),
        (Tissue::Bone, TissueStats { mean: 400.0, sd: 30.0 }),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub patient_id: String,
    /// `(rows, cols)` of each slice.
    pub canvas: [usize; 2],
    pub n_slices: usize,
    /// `(dx, dy, dz)` in mm.
    pub spacing: [f64; 3],
    pub body: Shape,
    pub body_tissue: Tissue,
    /// Painted in order over the body; later regions win.
    pub regions: Vec<Region>,
    pub tissue_hu: BTreeMap<Tissue, TissueStats>,
    pub seed: u64,
}

impl PhantomSpec {
    /// A pelvis-like layout scaled to the canvas with per-patient variation
    /// drawn from `seed`: fat layer, muscle, bladder above the prostate,
    /// two posterior bones and intermittent rectal gas.
    pub fn pelvis(patient_id: impl Into<String>, canvas: [usize; 2], n_slices: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h, w] = canvas;
        let (h, w) = (h as f64, w as f64);
        let mut vary = |v: f64| v * (1.0 + rng.random_range(-0.06..0.06));
        let (cy, cx) = (h / 2.0, w / 2.0);
        let body = Shape::Ellipse {
            center: [cy, cx],
            radii: [vary(0.42) * h, vary(0.44) * w],
        };
        let ellipse = |dy: f64, dx: f64, ry: f64, rx: f64| Shape::Ellipse {
            center: [cy + dy * h, cx + dx * w],
            radii: [ry * h, rx * w],
        };
        let muscle = ellipse(0.02, 0.0, vary(0.28), vary(0.29));
        let bladder = ellipse(vary(-0.10), 0.0, vary(0.115), vary(0.125));
        let prostate = ellipse(vary(0.125), 0.0, vary(0.10), vary(0.11));
        let bone_dx = vary(0.17);
        let bone_r = vary(0.045);
        let gas_start = rng.random_range(0..=n_slices / 3);
        let gas_len = rng.random_range(n_slices / 3..=(2 * n_slices) / 3).max(1);
        let region = |shape, tissue, taper| Region {
            shape,
            tissue,
            slices: None,
            taper,
        };
        let regions = vec![
            region(muscle, Tissue::Muscle, 0.0),
            region(bladder, Tissue::Bladder, 0.08),
            region(prostate, Tissue::Prostate, 0.08),
            region(ellipse(0.21, -bone_dx, bone_r, bone_r * h / w), Tissue::Bone, 0.0),
            region(ellipse(0.21, bone_dx, bone_r, bone_r * h / w), Tissue::Bone, 0.0),
            Region {
                shape: ellipse(0.255, 0.0, 0.03, 0.04),
                tissue: Tissue::Air,
                slices: Some([gas_start, (gas_start + gas_len).min(n_slices)]),
                taper: 0.0,
            },
        ];
        PhantomSpec {
            patient_id: patient_id.into(),
            canvas,
            n_slices,
            spacing: [1.8, 1.8, 3.0],
            body,
            body_tissue: Tissue::Fat,
            regions,
            tissue_hu: default_tissue_hu(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.canvas;
        if h == 0 || w == 0 || self.n_slices == 0 {
            return Err(Error::invalid("canvas", "dimensions must be positive"));
        }
        if let Some(bad) = self.spacing.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::invalid("spacing", format!("components must be > 0, got {bad}")));
        }
        for t in self.used_tissues() {
            let stats = self
                .tissue_hu
                .get(&t)
                .ok_or_else(|| Error::invalid("tissue_hu", format!("no statistics for {}", t.name())))?;
            if !(stats.sd >= 0.0 && stats.mean.is_finite()) {
                return Err(Error::invalid("tissue_hu", format!("bad statistics for {}", t.name())));
            }
        }
        for (i, region) in self.regions.iter().enumerate() {
            for k in 0..self.n_slices {
                let Some(scale) = region.scale_at(k, self.n_slices) else {
                    continue;
                };
                for r in 0..h {
                    for c in 0..w {
                        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                        if region.shape.contains(y, x, scale) && !self.body.contains(y, x, 1.0) {
                            return Err(Error::invalid(
                                "regions",
                                format!("region {i} ({}) extends outside the body at slice {k}, pixel ({r}, {c})", region.tissue.name()),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn used_tissues(&self) -> Vec<Tissue> {
        let mut t: Vec<Tissue> = self.regions.iter().map(|r| r.tissue).collect();
        t.push(self.body_tissue);
        t.push(Tissue::Air);
        t.sort();
        t.dedup();
        t
    }

    /// Rasterized tissue labels indexed `[slice, row, col]`.
    pub fn labels(&self) -> Array3<Tissue> {
        let [h, w] = self.canvas;
        let mut labels = Array3::from_elem((self.n_slices, h, w), Tissue::Air);
        for k in 0..self.n_slices {
            let scales: Vec<Option<f64>> = self.regions.iter().map(|r| r.scale_at(k, self.n_slices)).collect();
            for r in 0..h {
                for c in 0..w {
                    let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                    if !self.body.contains(y, x, 1.0) {
                        continue;
                    }
                    let mut t = self.body_tissue;
                    for (region, scale) in self.regions.iter().zip(&scales) {
                        if let Some(s) = scale {
                            if region.shape.contains(y, x, *s) {
                                t = region.tissue;
                            }
                        }
                    }
                    labels[[k, r, c]] = t;
                }
            }
        }
        labels
    }
}

/// A phantom volume together with its voxel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomVolume {
    pub volume: CtVolume,
    pub labels: Array3<Tissue>,
    pub spec: PhantomSpec,
}

fn to_hu(v: f64) -> i16 {
    v.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16
}

/// Samples the planning-CT truth: each voxel drawn independently from its
/// tissue's normal distribution.
pub fn generate_truth(spec: &PhantomSpec) -> Result<PhantomVolume> {
    spec.validate()?;
    let labels = spec.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7472_7574_6800_0000);
    let samplers: BTreeMap<Tissue, Normal<f64>> = spec
        .tissue_hu
        .iter()
        .map(|(t, s)| (*t, Normal::new(s.mean, s.sd).expect("validated statistics")))
        .collect();
    let voxels = labels.mapv(|t| to_hu(samplers[&t].sample(&mut rng)));
    let volume = CtVolume::new(voxels, spec.spacing, Modality::PhantomTruth, spec.patient_id.clone())?;
    Ok(PhantomVolume {
        volume,
        labels,
        spec: spec.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    /// Additive HU offset per tissue.
    pub hu_bias: BTreeMap<Tissue, f64>,
    /// Radial shading `A * (rho^2 - 1/2)`; darker center for positive `A`.
    pub cupping_amplitude: f64,
    /// Number of ring periods between the body center and its outline.
    pub ring_count: usize,
    /// Ring amplitude at the body outline; it falls off towards the center.
    pub ring_amplitude: f64,
    pub streak_count: usize,
    pub streak_amplitude: f64,
    /// Standard deviation of the added correlated noise at the body center.
    pub noise_sd: f64,
    /// Extra relative noise at the body outline (grows with `rho^2`).
    pub noise_surface_gain: f64,
    /// Gaussian correlation length of the noise, in pixels.
    pub noise_correlation: f64,
    /// Gaussian blur applied within the body before the artifacts, in pixels.
    pub blur_sigma: f64,
    pub seed: u64,
}

/// Offsets that turn the planning-CT tissue means into the CBCT ones.
pub fn default_hu_bias() -> BTreeMap<Tissue, f64> {
    BTreeMap::from([
        (Tissue::Muscle, -190.0),
        (Tissue::Fat, -110.0),
        (Tissue::Prostate, -194.0),
        (Tissue::Bladder, -166.0),
        (Tissue::Bone, -200.0),
    ])
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec {
            hu_bias: default_hu_bias(),
            cupping_amplitude: 17.0,
            ring_count: 6,
            ring_amplitude: 30.0,
            streak_count: 3,
            streak_amplitude: 20.0,
            noise_sd: 15.5,
            noise_surface_gain: 3.0,
            noise_correlation: 2.0,
            blur_sigma: 1.0,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    /// No degradation at all.
    pub fn none() -> Self {
        DegradationSpec {
            hu_bias: BTreeMap::new(),
            cupping_amplitude: 0.0,
            ring_count: 0,
            ring_amplitude: 0.0,
            streak_count: 0,
            streak_amplitude: 0.0,
            noise_sd: 0.0,
            noise_surface_gain: 0.0,
            noise_correlation: 0.0,
            blur_sigma: 0.0,
            seed: 0,
        }
    }

    fn bias(&self, t: Tissue) -> f64 {
        self.hu_bias.get(&t).copied().unwrap_or(0.0)
    }

    pub fn validate(&self, tissue_hu: &BTreeMap<Tissue, TissueStats>) -> Result<()> {
        let nonneg = [
            ("noise_sd", self.noise_sd),
            ("noise_surface_gain", self.noise_surface_gain),
            ("noise_correlation", self.noise_correlation),
            ("blur_sigma", self.blur_sigma),
            ("ring_amplitude", self.ring_amplitude),
            ("streak_amplitude", self.streak_amplitude),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid("degradation", format!("{name} = {v} must be finite and >= 0")));
            }
        }
        let air = AIR_HU as f64 + self.bias(Tissue::Air);
        if air >= AIR_LIMIT_HU {
            return Err(Error::invalid(
                "hu_bias",
                format!("air bias {} lifts air to {air} HU, at or above {AIR_LIMIT_HU}", self.bias(Tissue::Air)),
            ));
        }
        for (t, stats) in tissue_hu {
            if *t != Tissue::Air && stats.mean + self.bias(*t) < AIR_LIMIT_HU {
                return Err(Error::invalid(
                    "hu_bias",
                    format!("{} bias pushes its mean below {AIR_LIMIT_HU} HU", t.name()),
                ));
            }
        }
        Ok(())
    }
}

/// Blur restricted to `mask`: `G*(v m) / G*(m)` inside the mask, `v` outside.
fn masked_blur(values: &Array2<f64>, mask: &Array2<bool>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return values.clone();
    }
    let kernel = gaussian_kernel(sigma, default_radius(sigma));
    let m = mask.mapv(|b| if b { 1.0 } else { 0.0 });
    let vm = values * &m;
    let num = separable_filter(vm.view(), &kernel);
    let den = separable_filter(m.view(), &kernel);
    Zip::from(values)
        .and(mask)
        .and(&num)
        .and(&den)
        .map_collect(|&v, &inside, &n, &d| if inside && d > 1e-12 { n / d } else { v })
}

/// Unit-variance noise with Gaussian spatial correlation `sigma`.
fn correlated_noise<R: Rng>(h: usize, w: usize, sigma: f64, rng: &mut R) -> Array2<f64> {
    let white = Array2::from_shape_simple_fn((h, w), || rng.sample::<f64, _>(rand_distr::StandardNormal));
    if sigma <= 0.0 {
        return white;
    }
    let kernel = gaussian_kernel(sigma, default_radius(sigma));
    let gain: f64 = kernel.iter().map(|k| k * k).sum();
    separable_filter(white.view(), &kernel).mapv(|v| v / gain)
}

/// Applies the CBCT artifact model to a labeled truth phantom.
///
/// Tissue voxels are biased per class, blurred within the body, then receive
/// cupping, rings, streaks and correlated noise, and are finally held at or
/// above -464 HU. Air voxels only receive the air bias.
pub fn degrade_to_cbct(truth: &PhantomVolume, spec: &DegradationSpec) -> Result<CtVolume> {
    spec.validate(&truth.spec.tissue_hu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [h, w, d] = truth.volume.dims();
    let body = truth.spec.body;
    let center = body.center();
    let mut out = Array3::<i16>::zeros((d, h, w));
    for k in 0..d {
        let labels = truth.labels.index_axis(Axis(0), k);
        let tissue = labels.mapv(|t| t != Tissue::Air);
        let biased = Zip::from(&truth.volume.slice(k))
            .and(&labels)
            .map_collect(|&v, &t| v as f64 + spec.bias(t));
        let mut v = masked_blur(&biased, &tissue, spec.blur_sigma);
        let streaks: Vec<(f64, f64)> = (0..spec.streak_count)
            .map(|_| {
                let angle = rng.random_range(-PI..PI);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (angle, sign)
            })
            .collect();
        let noise = if spec.noise_sd > 0.0 {
            Some(correlated_noise(h, w, spec.noise_correlation, &mut rng))
        } else {
            None
        };
        let ring_phase = rng.random_range(0.0..2.0 * PI);
        for r in 0..h {
            for c in 0..w {
                if !tissue[[r, c]] {
                    continue;
                }
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let rho = body.rho(y, x);
                let mut add = spec.cupping_amplitude * (rho * rho - 0.5);
                if spec.ring_count > 0 {
                    add += spec.ring_amplitude * rho * rho * (2.0 * PI * spec.ring_count as f64 * rho + ring_phase).sin();
                }
                let theta = (y - center[0]).atan2(x - center[1]);
                for &(angle, sign) in &streaks {
                    let mut dt = (theta - angle).abs() % (2.0 * PI);
                    if dt > PI {
                        dt = 2.0 * PI - dt;
                    }
                    add += sign * spec.streak_amplitude * rho * (-(dt * dt) / (2.0 * 0.06 * 0.06)).exp();
                }
                if let Some(n) = &noise {
                    add += spec.noise_sd * (1.0 + spec.noise_surface_gain * rho * rho) * n[[r, c]];
                }
                v[[r, c]] = (v[[r, c]] + add).max(AIR_LIMIT_HU + 1.0);
            }
        }
        out.index_axis_mut(Axis(0), k).assign(&v.mapv(to_hu));
    }
    truth.volume.with_voxels(out, Modality::PhantomCbct)
}

/// A rectangular ROI on one slice.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub id: String,
    pub tissue: Tissue,
    pub slice: usize,
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

/// Picks up to `per_class` ROIs of `size x size` for each soft tissue.
///
/// ROIs are spread over evenly spaced slices; on each slice the box must lie
/// entirely inside one tissue, and successive boxes of a class are placed as
/// far as possible from the earlier ones.
pub fn select_rois(labels: &Array3<Tissue>, per_class: usize, size: usize) -> Vec<Roi> {
    let (d, h, w) = labels.dim();
    let mut rois = Vec::new();
    if size == 0 || size > h || size > w {
        return rois;
    }
    for tissue in Tissue::SOFT {
        let mut chosen: Vec<[f64; 2]> = Vec::new();
        for j in 0..per_class {
            let k = ((j as f64 + 0.5) * d as f64 / per_class as f64) as usize;
            let k = k.min(d - 1);
            let slice = labels.index_axis(Axis(0), k);
            // Integral image of the class indicator for O(1) box checks.
            let mut integral = Array2::<u32>::zeros((h + 1, w + 1));
            for r in 0..h {
                for c in 0..w {
                    let inside = (slice[[r, c]] == tissue) as u32;
                    integral[[r + 1, c + 1]] = inside + integral[[r, c + 1]] + integral[[r + 1, c]] - integral[[r, c]];
                }
            }
            let full = (size * size) as u32;
            let mut candidates = Vec::new();
            let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    if slice[[r, c]] == tissue {
                        sy += r as f64;
                        sx += c as f64;
                        n += 1.0;
                    }
                }
            }
            for r in 0..=h - size {
                for c in 0..=w - size {
                    let count = integral[[r + size, c + size]] + integral[[r, c]] - integral[[r, c + size]] - integral[[r + size, c]];
                    if count == full {
                        candidates.push([r as f64, c as f64]);
                    }
                }
            }
            if candidates.is_empty() {
                continue;
            }
            let half = size as f64 / 2.0;
            let centroid = [sy / n - half, sx / n - half];
            let dist2 = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
            let best = if chosen.is_empty() {
                candidates
                    .iter()
                    .min_by(|a, b| dist2(a, &centroid).total_cmp(&dist2(b, &centroid)))
                    .copied()
            } else {
                candidates
                    .iter()
                    .max_by(|a, b| {
                        let da = chosen.iter().map(|p| dist2(a, p)).fold(f64::INFINITY, f64::min);
                        let db = chosen.iter().map(|p| dist2(b, p)).fold(f64::INFINITY, f64::min);
                        da.total_cmp(&db)
                    })
                    .copied()
            };
            let best = best.expect("non-empty candidates");
            chosen.push(best);
            rois.push(Roi {
                id: format!("{}-{j}", tissue.name()),
                tissue,
                slice: k,
                row: best[0] as usize,
                col: best[1] as usize,
                height: size,
                width: size,
            });
        }
    }
    rois
}

/// Settings for a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub canvas: [usize; 2],
    pub n_slices: usize,
    pub seed: u64,
    pub degradation: DegradationSpec,
    pub rois_per_class: usize,
    pub roi_size: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            canvas: [72, 88],
            n_slices: 24,
            seed: 0,
            degradation: DegradationSpec::default(),
            rois_per_class: 4,
            roi_size: 10,
        }
    }
}

impl DatasetSpec {
    /// Seed of patient `index`, derived from the dataset seed.
    pub fn patient_seed(&self, index: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        rng.random()
    }

    pub fn patient_spec(&self, index: usize) -> PhantomSpec {
        PhantomSpec::pelvis(format!("P{index:03}"), self.canvas, self.n_slices, self.patient_seed(index))
    }

    /// Truth phantom and CBCT counterpart of patient `index`.
    pub fn generate_patient(&self, index: usize) -> Result<(PhantomVolume, CtVolume)> {
        let spec = self.patient_spec(index);
        let truth = generate_truth(&spec)?;
        let degradation = DegradationSpec {
            seed: spec.seed.wrapping_add(1),
            ..self.degradation.clone()
        };
        let cbct = degrade_to_cbct(&truth, &degradation)?;
        Ok((truth, cbct))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub patient_id: String,
    pub seed: u64,
    /// Sidecar paths relative to the manifest directory.
    pub truth: PathBuf,
    pub cbct: PathBuf,
    pub phantom: PhantomSpec,
    pub rois: Vec<Roi>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dataset: DatasetSpec,
    pub patients: Vec<PatientEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Sidecar { path, source })
    }

    pub fn patient(&self, id: &str) -> Option<&PatientEntry> {
        self.patients.iter().find(|p| p.patient_id == id)
    }
}

/// Writes `n_patients` truth/CBCT pairs and `manifest.json` into `out_dir`.
pub fn emit_dataset(n_patients: usize, spec: &DatasetSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut patients = Vec::with_capacity(n_patients);
    for i in 0..n_patients {
        let (truth, cbct) = spec.generate_patient(i)?;
        let id = truth.spec.patient_id.clone();
        let truth_name = PathBuf::from(format!("{id}_truth.json"));
        let cbct_name = PathBuf::from(format!("{id}_cbct.json"));
        save_volume(&truth.volume, out_dir.join(&truth_name))?;
        save_volume(&cbct, out_dir.join(&cbct_name))?;
        patients.push(PatientEntry {
            patient_id: id,
            seed: truth.spec.seed,
            truth: truth_name,
            cbct: cbct_name,
            rois: select_rois(&truth.labels, spec.rois_per_class, spec.roi_size),
            phantom: truth.spec,
        });
    }
    let manifest = Manifest {
        version: 1,
        dataset: spec.clone(),
        patients,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
