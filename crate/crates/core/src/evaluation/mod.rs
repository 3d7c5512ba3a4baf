//! Quantitative evaluation: ROI statistics, histograms, SelfSSIM and cycle
//! difference maps, plus the report writer.

mod plots;
mod report;

use ndarray::{s, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::gaussian_kernel;
use crate::losses::sobel_magnitude;
use crate::phantom::Roi;
use crate::preprocess::{CLIP_HIGH, CLIP_LOW};
use crate::volume::CtVolume;

pub use plots::{checkerboard, Plot};
pub use report::{
    emit_report, CycleRecord, EvalReport, HistogramRecord, PatientVolumes, Provenance, ReportInputs, RoiRecord, SelfSsimRecord,
    TissueSummary, VolumeInput, REPORT_VERSION,
};

/// Mean and population standard deviation of the voxels inside `roi`.
pub fn roi_stats(vol: &CtVolume, roi: &Roi) -> Result<(f64, f64)> {
    let [h, w, d] = vol.dims();
    if roi.height == 0 || roi.width == 0 || roi.slice >= d || roi.row + roi.height > h || roi.col + roi.width > w {
        return Err(Error::invalid(
            "roi",
            format!(
                "{} at slice {}, ({}, {}) size {}x{} is outside a {h}x{w}x{d} volume",
                roi.id, roi.slice, roi.row, roi.col, roi.height, roi.width
            ),
        ));
    }
    let view = vol.slice(roi.slice);
    let window = view.slice(s![roi.row..roi.row + roi.height, roi.col..roi.col + roi.width]);
    let n = window.len() as f64;
    let mean = window.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = window.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Equal-width histogram with left-closed bins.
///
/// Values outside the range are counted in the nearest end bin, so the
/// counts always sum to the number of voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

pub const DEFAULT_HISTOGRAM_BINS: usize = 70;
pub const DEFAULT_HISTOGRAM_RANGE: (f64, f64) = (CLIP_LOW, CLIP_HIGH);

pub fn histogram(values: impl Iterator<Item = f64>, bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if bins < 2 {
        return Err(Error::invalid("bins", format!("need at least 2, got {bins}")));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::invalid("range", format!("[{lo}, {hi}] is not a valid interval")));
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for v in values {
        let b = ((v - lo) / width).floor();
        let b = if b < 0.0 { 0 } else { (b as usize).min(bins - 1) };
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

pub fn volume_histogram(vol: &CtVolume, bins: usize, range: (f64, f64)) -> Result<Histogram> {
    histogram(vol.voxels().iter().map(|&v| v as f64), bins, range)
}

/// HU to the [0, 255] display scale over the clip range.
pub fn hu_to_gray(v: f64) -> f64 {
    (v.clamp(CLIP_LOW, CLIP_HIGH) - CLIP_LOW) / (CLIP_HIGH - CLIP_LOW) * 255.0
}

pub const SELF_SSIM_SIGMA: f64 = 3.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;

/// Correlation with a separable kernel over the valid region only.
fn valid_filter(img: ArrayView2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            tmp[[r, c]] = kernel.iter().enumerate().map(|(i, t)| t * img[[r, c + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[[r, c]] = kernel.iter().enumerate().map(|(i, t)| t * tmp[[r + i, c]]).sum();
        }
    }
    out
}

/// Mean SSIM of two images on the 0..255 scale: 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, averaged over all full windows.
pub fn ssim(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("image", format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let kernel = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW / 2);
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let mu_a = valid_filter(a, &kernel);
    let mu_b = valid_filter(b, &kernel);
    let aa = valid_filter((&a * &a).view(), &kernel);
    let bb = valid_filter((&b * &b).view(), &kernel);
    let ab = valid_filter((&a * &b).view(), &kernel);
    let mut total = 0.0;
    Zip::from(&mu_a).and(&mu_b).and(&aa).and(&bb).and(&ab).for_each(|&ma, &mb, &saa, &sbb, &sab| {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    });
    Ok(total / mu_a.len() as f64)
}

/// SSIM between an HU image and its sigma-3 Gaussian blur (radius 9,
/// reflect padding), after mapping [-500, 200] HU onto [0, 255].
///
/// Lower values mean sharper, higher-contrast content.
pub fn self_ssim(img: ArrayView2<f64>) -> Result<f64> {
    let (h, w) = img.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("image", format!("SelfSSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let gray = img.mapv(hu_to_gray);
    let blurred = crate::filters::gaussian_blur(gray.view(), SELF_SSIM_SIGMA);
    ssim(gray.view(), blurred.view())
}

pub fn self_ssim_hu(img: ArrayView2<i16>) -> Result<f64> {
    self_ssim(img.mapv(|v| v as f64).view())
}

/// Sobel gradient magnitude of `x_cyc` minus that of `x`.
pub fn cycle_difference_image(x: ArrayView2<f64>, x_cyc: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.dim() != x_cyc.dim() {
        return Err(Error::shape(x.shape(), x_cyc.shape()));
    }
    Ok(sobel_magnitude(x_cyc)? - sobel_magnitude(x)?)
}

/// Summary of a cycle difference map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleDifferenceSummary {
    pub mean_abs: f64,
    pub max_abs: f64,
    pub rms: f64,
}

impl CycleDifferenceSummary {
    pub fn of(map: ArrayView2<f64>) -> Self {
        let n = map.len().max(1) as f64;
        CycleDifferenceSummary {
            mean_abs: map.iter().map(|v| v.abs()).sum::<f64>() / n,
            max_abs: map.iter().fold(0.0, |m, v| m.max(v.abs())),
            rms: (map.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
        }
    }
}

/// Centered square windows of side `size`, one per listed slice.
pub fn centered_rois(vol: &CtVolume, slices: &[usize], size: usize) -> Result<Vec<Roi>> {
    let [h, w, d] = vol.dims();
    if size > h || size > w {
        return Err(Error::invalid("roi", format!("{size}x{size} window does not fit {h}x{w}")));
    }
    slices
        .iter()
        .map(|&k| {
            if k >= d {
                return Err(Error::invalid("roi", format!("slice {k} outside volume with {d} slices")));
            }
            Ok(Roi {
                id: format!("center-{k}"),
                tissue: crate::phantom::Tissue::Muscle,
                slice: k,
                row: (h - size) / 2,
                col: (w - size) / 2,
                height: size,
                width: size,
            })
        })
        .collect()
}

/// Extracts the voxels of `roi` as floating point.
pub fn roi_image(vol: &CtVolume, roi: &Roi) -> Array2<f64> {
    vol.slice(roi.slice)
        .slice(s![roi.row..roi.row + roi.height, roi.col..roi.col + roi.width])
        .mapv(|v| v as f64)
}

/// Dice overlap of two boolean masks; 1 when both are empty.
pub fn dice(a: ArrayView2<bool>, b: ArrayView2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let (mut both, mut total) = (0usize, 0usize);
    Zip::from(&a).and(&b).for_each(|&x, &y| {
        both += (x && y) as usize;
        total += x as usize + y as usize;
    });
    Ok(if total == 0 { 1.0 } else { 2.0 * both as f64 / total as f64 })
}
