//! Slice preparation: body masking, HU clip/scale and cropping.

use std::collections::VecDeque;

use ndarray::{s, Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{CtVolume, AIR_HU};

pub const CLIP_LOW: f64 = -500.0;
pub const CLIP_HIGH: f64 = 200.0;
const CLIP_CENTER: f64 = (CLIP_LOW + CLIP_HIGH) / 2.0;
const CLIP_HALF_WIDTH: f64 = (CLIP_HIGH - CLIP_LOW) / 2.0;

pub const OTSU_BINS: usize = 256;

/// Maps one HU value to the network's [-1, 1] scale.
pub fn clip_and_scale_value(hu: f64) -> f64 {
    (hu.clamp(CLIP_LOW, CLIP_HIGH) - CLIP_CENTER) / CLIP_HALF_WIDTH
}

pub fn unscale_value(v: f64) -> f64 {
    CLIP_HALF_WIDTH * v + CLIP_CENTER
}

/// Clamps to [-500, 200] HU and maps affinely onto [-1, 1].
pub fn clip_and_scale(slice: ArrayView2<i16>) -> Array2<f32> {
    slice.mapv(|v| clip_and_scale_value(v as f64) as f32)
}

/// Inverse of [`clip_and_scale`] on [-1, 1], rounded to the nearest HU.
pub fn unscale(pixels: ArrayView2<f32>) -> Result<Array2<i16>> {
    if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::invalid("pixels", format!("scaled value {v} outside [-1, 1]")));
    }
    Ok(pixels.mapv(|v| unscale_value(v as f64).round() as i16))
}

/// A network-ready slice: values in [-1, 1], both sides divisible by 8.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledSlice {
    pixels: Array2<f32>,
}

impl ScaledSlice {
    pub const MULTIPLE: usize = 8;

    pub fn new(pixels: Array2<f32>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 || h % Self::MULTIPLE != 0 || w % Self::MULTIPLE != 0 {
            return Err(Error::invalid(
                "slice",
                format!("{h}x{w} is not a positive multiple of {}", Self::MULTIPLE),
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::invalid("slice", format!("value {v} outside [-1, 1]")));
        }
        Ok(ScaledSlice { pixels })
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f32> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

/// Histogram used by the Otsu search: `OTSU_BINS` equal bins over `[min, max]`.
#[derive(Clone, Debug)]
pub struct OtsuHistogram {
    pub min: f64,
    pub width: f64,
    pub counts: Vec<u64>,
}

impl OtsuHistogram {
    pub fn from_values(values: impl Iterator<Item = i16> + Clone) -> Result<Self> {
        let (mut lo, mut hi) = (i16::MAX, i16::MIN);
        for v in values.clone() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            return Err(Error::Degenerate("empty slice".into()));
        }
        if lo == hi {
            return Err(Error::Degenerate(format!("constant slice at {lo} HU has no threshold")));
        }
        let min = lo as f64;
        let width = (hi as f64 - min) / OTSU_BINS as f64;
        let mut hist = OtsuHistogram {
            min,
            width,
            counts: vec![0; OTSU_BINS],
        };
        for v in values {
            let b = hist.bin(v);
            hist.counts[b] += 1;
        }
        Ok(hist)
    }

    pub fn bin(&self, v: i16) -> usize {
        (((v as f64 - self.min) / self.width).floor().max(0.0) as usize).min(OTSU_BINS - 1)
    }

    pub fn center(&self, b: usize) -> f64 {
        self.min + (b as f64 + 0.5) * self.width
    }

    /// Upper edge of bin `b`.
    pub fn edge(&self, b: usize) -> f64 {
        self.min + (b as f64 + 1.0) * self.width
    }

    /// Last background bin of the split maximizing between-class variance
    /// (first maximizer on ties).
    pub fn otsu_bin(&self) -> usize {
        let total: u64 = self.counts.iter().sum();
        let total_sum: f64 = self.counts.iter().enumerate().map(|(b, &n)| n as f64 * self.center(b)).sum();
        let (mut n0, mut sum0) = (0u64, 0.0f64);
        let (mut best, mut best_var) = (0usize, f64::NEG_INFINITY);
        for k in 0..OTSU_BINS - 1 {
            n0 += self.counts[k];
            sum0 += self.counts[k] as f64 * self.center(k);
            let n1 = total - n0;
            if n0 == 0 || n1 == 0 {
                continue;
            }
            let w0 = n0 as f64 / total as f64;
            let w1 = n1 as f64 / total as f64;
            let mu0 = sum0 / n0 as f64;
            let mu1 = (total_sum - sum0) / n1 as f64;
            let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
            if var > best_var {
                best_var = var;
                best = k;
            }
        }
        best
    }
}

/// Otsu threshold in HU: voxels at or above it form the foreground class.
pub fn otsu_threshold(slice: ArrayView2<i16>) -> Result<f64> {
    let hist = OtsuHistogram::from_values(slice.iter().copied())?;
    Ok(hist.edge(hist.otsu_bin()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Otsu threshold computed on each slice separately.
    #[default]
    PerSlice,
    /// One threshold from the histogram of the whole volume.
    PerVolume,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyMask {
    pub mask: Array2<bool>,
    pub source_threshold: f64,
}

impl BodyMask {
    /// Thresholds `slice` with a precomputed histogram, keeps the largest
    /// 4-connected foreground component and fills its interior holes.
    fn from_histogram(slice: ArrayView2<i16>, hist: &OtsuHistogram) -> Self {
        let k = hist.otsu_bin();
        let raw = slice.mapv(|v| hist.bin(v) > k);
        BodyMask {
            mask: fill_holes(&largest_component(&raw)),
            source_threshold: hist.edge(k),
        }
    }

    pub fn from_slice(slice: ArrayView2<i16>) -> Result<Self> {
        let hist = OtsuHistogram::from_values(slice.iter().copied())?;
        Ok(BodyMask::from_histogram(slice, &hist))
    }

    pub fn all(h: usize, w: usize, value: bool) -> Self {
        BodyMask {
            mask: Array2::from_elem((h, w), value),
            source_threshold: f64::NAN,
        }
    }
}

/// Body masks for every slice of `vol`.
///
/// A constant slice (for example an empty air slice) yields an empty mask in
/// per-slice mode rather than an error.
pub fn body_masks(vol: &CtVolume, mode: MaskMode) -> Result<Vec<BodyMask>> {
    let [h, w, d] = vol.dims();
    match mode {
        MaskMode::PerSlice => (0..d)
            .map(|k| match BodyMask::from_slice(vol.slice(k)) {
                Err(Error::Degenerate(_)) => Ok(BodyMask::all(h, w, vol.slice(k)[[0, 0]] > AIR_HU)),
                other => other,
            })
            .collect(),
        MaskMode::PerVolume => {
            let hist = OtsuHistogram::from_values(vol.voxels().iter().copied())?;
            Ok((0..d).map(|k| BodyMask::from_histogram(vol.slice(k), &hist)).collect())
        }
    }
}

const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Labels 4-connected components of `true` pixels; returns labels (0 = none)
/// and component sizes indexed by label - 1.
fn label_components(mask: &Array2<bool>) -> (Array2<u32>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] || labels[[r, c]] != 0 {
                continue;
            }
            let label = sizes.len() as u32 + 1;
            labels[[r, c]] = label;
            queue.push_back((r, c));
            let mut size = 0;
            while let Some((pr, pc)) = queue.pop_front() {
                size += 1;
                for (dr, dc) in NEIGHBOURS {
                    let (nr, nc) = (pr as isize + dr, pc as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask[[nr, nc]] && labels[[nr, nc]] == 0 {
                        labels[[nr, nc]] = label;
                        queue.push_back((nr, nc));
                    }
                }
            }
            sizes.push(size);
        }
    }
    (labels, sizes)
}

/// Keeps only the largest 4-connected component (the first one on ties).
pub fn largest_component(mask: &Array2<bool>) -> Array2<bool> {
    let (labels, sizes) = label_components(mask);
    let Some(best) = sizes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).map(|(i, _)| i as u32 + 1) else {
        return mask.clone();
    };
    labels.mapv(|l| l == best)
}

/// Sets every background region that does not touch the border to `true`.
pub fn fill_holes(mask: &Array2<bool>) -> Array2<bool> {
    let background = mask.mapv(|v| !v);
    let (labels, sizes) = label_components(&background);
    let (h, w) = mask.dim();
    let mut outside = vec![false; sizes.len() + 1];
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                outside[labels[[r, c]] as usize] = true;
            }
        }
    }
    Zip::from(mask).and(&labels).map_collect(|&m, &l| m || !outside[l as usize])
}

/// Replaces every voxel outside the mask with -1000 HU.
pub fn apply_body_mask(slice: ArrayView2<i16>, mask: &BodyMask) -> Result<Array2<i16>> {
    if slice.dim() != mask.mask.dim() {
        return Err(Error::shape(slice.shape(), mask.mask.shape()));
    }
    Ok(Zip::from(&slice).and(&mask.mask).map_collect(|&v, &m| if m { v } else { AIR_HU }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub height: usize,
    pub width: usize,
    /// Maximum offset of the window center from the slice center, in pixels.
    pub jitter: usize,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec {
            height: 384,
            width: 480,
            jitter: 16,
        }
    }
}

impl CropSpec {
    pub fn new(height: usize, width: usize, jitter: usize) -> Result<Self> {
        let spec = CropSpec { height, width, jitter };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::invalid(
                "crop",
                format!("{}x{} must be positive multiples of 8", self.height, self.width),
            ));
        }
        Ok(())
    }

    pub fn without_jitter(self) -> Self {
        CropSpec { jitter: 0, ..self }
    }

    /// Top-left corner of the crop window in an `h x w` slice.
    ///
    /// Offsets are drawn uniformly from `[-jitter, jitter]` per axis and then
    /// limited so the window stays inside the slice.
    pub fn window(&self, h: usize, w: usize, seed: u64) -> Result<(usize, usize)> {
        self.validate()?;
        if self.height > h || self.width > w {
            return Err(Error::invalid(
                "crop",
                format!("{}x{} crop does not fit a {h}x{w} slice", self.height, self.width),
            ));
        }
        let (r0, c0) = ((h - self.height) / 2, (w - self.width) / 2);
        if self.jitter == 0 {
            return Ok((r0, c0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = self.jitter as i64;
        let dr = rng.random_range(-j..=j);
        let dc = rng.random_range(-j..=j);
        let r = (r0 as i64 + dr).clamp(0, (h - self.height) as i64) as usize;
        let c = (c0 as i64 + dc).clamp(0, (w - self.width) as i64) as usize;
        Ok((r, c))
    }
}

pub fn center_crop<T: Clone>(slice: ArrayView2<T>, spec: &CropSpec, seed: u64) -> Result<Array2<T>> {
    let (h, w) = slice.dim();
    let (r, c) = spec.window(h, w, seed)?;
    Ok(slice.slice(s![r..r + spec.height, c..c + spec.width]).to_owned())
}

/// Geometric alignment of one volume onto another.
///
/// Phantom pairs are aligned by construction, so the pipeline ships only the
/// identity; a registration backend for real scans plugs in here.
pub trait Aligner {
    fn align(&self, moving: &CtVolume, fixed: &CtVolume) -> Result<CtVolume>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityAligner;

impl Aligner for IdentityAligner {
    fn align(&self, moving: &CtVolume, _fixed: &CtVolume) -> Result<CtVolume> {
        Ok(moving.clone())
    }
}

/// Masks every slice and maps it to [-1, 1]; no cropping.
pub fn masked_scaled_slices(vol: &CtVolume, mode: MaskMode) -> Result<Vec<Array2<f32>>> {
    let masks = body_masks(vol, mode)?;
    masks
        .iter()
        .enumerate()
        .map(|(k, m)| Ok(clip_and_scale(apply_body_mask(vol.slice(k), m)?.view())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn scaling_contract() {
        for (hu, v) in [(-1000.0, -1.0), (-500.0, -1.0), (-150.0, 0.0), (200.0, 1.0), (500.0, 1.0)] {
            assert_eq!(clip_and_scale_value(hu), v);
        }
        assert!((clip_and_scale_value(-465.0) + 0.9).abs() < 1e-15);
    }

    #[test]
    fn unscale_endpoints_and_range() {
        let px = array![[-1.0f32, 0.0, 1.0]];
        assert_eq!(unscale(px.view()).unwrap(), array![[-500i16, -150, 200]]);
        assert!(unscale(array![[1.01f32]].view()).is_err());
    }

    #[test]
    fn unscale_round_trip_within_half_hu() {
        for hu in -500i16..=200 {
            let back = unscale(clip_and_scale(array![[hu]].view()).view()).unwrap()[[0, 0]];
            assert_eq!(back, hu);
        }
    }

    #[test]
    fn otsu_half_air_half_water() {
        let slice = Array2::from_shape_fn((8, 8), |(r, _)| if r < 4 { -1000i16 } else { 0 });
        let t = otsu_threshold(slice.view()).unwrap();
        assert!(t > -1000.0 && t <= 0.0, "{t}");
    }

    #[test]
    fn otsu_rejects_constant() {
        let slice = Array2::from_elem((4, 4), 7i16);
        assert!(matches!(otsu_threshold(slice.view()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn largest_component_and_hole_fill() {
        let raw = array![
            [true, false, false, false, false, false],
            [false, false, true, true, true, false],
            [false, false, true, false, true, false],
            [false, false, true, true, true, false],
            [false, false, false, false, false, false],
        ];
        let largest = largest_component(&raw);
        assert!(!largest[[0, 0]]);
        assert!(largest[[1, 2]] && !largest[[2, 3]]);
        let filled = fill_holes(&largest);
        assert!(filled[[2, 3]]);
        assert_eq!(filled.iter().filter(|v| **v).count(), 9);
    }

    #[test]
    fn body_mask_on_disk_with_speckle() {
        let mut slice = Array2::from_shape_fn((32, 32), |(r, c)| {
            let (y, x) = (r as f64 - 15.5, c as f64 - 15.5);
            if y * y + x * x < 100.0 {
                40i16
            } else {
                -1000
            }
        });
        slice[[1, 1]] = 60; // isolated speckle outside the body
        slice[[15, 15]] = -1000; // air pocket inside the body
        let m = BodyMask::from_slice(slice.view()).unwrap();
        assert!(!m.mask[[1, 1]]);
        assert!(m.mask[[15, 15]]);
        let masked = apply_body_mask(slice.view(), &m).unwrap();
        assert_eq!(masked[[1, 1]], -1000);
        assert_eq!(masked[[16, 16]], 40);
    }

    #[test]
    fn mask_all_true_false_and_checkerboard() {
        let slice = Array2::from_shape_fn((4, 6), |(r, c)| (r * 10 + c) as i16);
        let all = BodyMask::all(4, 6, true);
        assert_eq!(apply_body_mask(slice.view(), &all).unwrap(), slice);
        let none = BodyMask::all(4, 6, false);
        assert!(apply_body_mask(slice.view(), &none).unwrap().iter().all(|&v| v == -1000));
        let checker = BodyMask {
            mask: Array2::from_shape_fn((4, 6), |(r, c)| (r + c) % 2 == 0),
            source_threshold: 0.0,
        };
        let out = apply_body_mask(slice.view(), &checker).unwrap();
        for ((r, c), &v) in out.indexed_iter() {
            let expected = if (r + c) % 2 == 0 { slice[[r, c]] } else { -1000 };
            assert_eq!(v, expected);
        }
        assert!(apply_body_mask(slice.view(), &BodyMask::all(3, 6, true)).is_err());
    }

    #[test]
    fn crop_window_arithmetic() {
        let spec = CropSpec::new(384, 480, 0).unwrap();
        assert_eq!(spec.window(512, 512, 0).unwrap(), (64, 16));
        let slice = Array2::from_shape_fn((16, 24), |(r, c)| r * 100 + c);
        let same = CropSpec::new(16, 24, 0).unwrap();
        assert_eq!(center_crop(slice.view(), &same, 3).unwrap(), slice);
        assert!(CropSpec::new(24, 24, 0).unwrap().window(16, 24, 0).is_err());
    }

    #[test]
    fn crop_jitter_is_seeded_and_bounded() {
        let spec = CropSpec::new(384, 480, 8).unwrap();
        let a = spec.window(512, 512, 11).unwrap();
        assert_eq!(a, spec.window(512, 512, 11).unwrap());
        for seed in 0..200 {
            let (r, c) = spec.window(512, 512, seed).unwrap();
            assert!((56..=72).contains(&r) && (8..=24).contains(&c));
        }
    }

    #[test]
    fn crop_spec_requires_multiples_of_eight() {
        assert!(CropSpec::new(380, 480, 0).is_err());
        assert!(CropSpec::default().validate().is_ok());
    }

    #[test]
    fn scaled_slice_invariants() {
        assert!(ScaledSlice::new(Array2::zeros((8, 16))).is_ok());
        assert!(ScaledSlice::new(Array2::zeros((8, 12))).is_err());
        assert!(ScaledSlice::new(Array2::from_elem((8, 8), 1.5)).is_err());
    }
}
