//! Slice-by-slice inference with trained generators.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Tensor;
use crate::networks::Generator;
use crate::preprocess::{masked_scaled_slices, unscale, CropSpec, MaskMode};
use crate::trainer::load_checkpoint;
use crate::volume::{load_volume, save_volume, CtVolume, Modality, AIR_HU};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// CBCT to planning CT.
    #[default]
    CToP,
    /// Planning CT to CBCT.
    PToC,
}

/// A translation request as issued from the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationJob {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    /// Window fed to the generator; `None` uses the whole slice.
    pub crop: Option<CropSpec>,
    pub direction: Direction,
    pub mask_mode: MaskMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationStats {
    pub slices: usize,
    pub seconds: f64,
    pub slices_per_second: f64,
}

/// One slice in network units: the generator input and its translation,
/// both covering the crop window only.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledPair {
    pub input: Array2<f32>,
    pub output: Array2<f32>,
}

pub struct Translator {
    pub g_cp: Generator,
    pub g_pc: Generator,
    pub crop: Option<CropSpec>,
    pub mask_mode: MaskMode,
}

/// Pads `img` symmetrically with `value` up to multiples of `m`; returns
/// the padded image and the top-left offset of the original.
fn pad_to_multiple(img: ArrayView2<f32>, m: usize, value: f32) -> (Array2<f32>, (usize, usize)) {
    let (h, w) = img.dim();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return (img.to_owned(), (0, 0));
    }
    let (r0, c0) = ((ph - h) / 2, (pw - w) / 2);
    let mut out = Array2::from_elem((ph, pw), value);
    out.slice_mut(s![r0..r0 + h, c0..c0 + w]).assign(&img);
    (out, (r0, c0))
}

impl Translator {
    pub fn new(g_cp: Generator, g_pc: Generator) -> Self {
        Translator {
            g_cp,
            g_pc,
            crop: None,
            mask_mode: MaskMode::PerSlice,
        }
    }

    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let state = load_checkpoint(path)?;
        Ok(Self::new(state.g_cp, state.g_pc))
    }

    pub fn with_crop(mut self, crop: Option<CropSpec>) -> Self {
        self.crop = crop.map(CropSpec::without_jitter);
        self
    }

    pub fn with_mask_mode(mut self, mode: MaskMode) -> Self {
        self.mask_mode = mode;
        self
    }

    fn generator(&self, direction: Direction) -> &Generator {
        match direction {
            Direction::CToP => &self.g_cp,
            Direction::PToC => &self.g_pc,
        }
    }

    fn window(&self, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
        match self.crop {
            Some(crop) => {
                let (r, c) = crop.without_jitter().window(h, w, 0)?;
                Ok((r, c, crop.height, crop.width))
            }
            None => Ok((0, 0, h, w)),
        }
    }

    /// Runs `g` on a scaled image of any size, padding with air as needed.
    fn run(g: &Generator, img: ArrayView2<f32>) -> Result<Array2<f32>> {
        let (h, w) = img.dim();
        let (padded, (r0, c0)) = pad_to_multiple(img, g.spec().size_multiple(), -1.0);
        let out: Tensor = g.forward(&padded.insert_axis(Axis(0)))?;
        Ok(out.index_axis(Axis(0), 0).slice(s![r0..r0 + h, c0..c0 + w]).to_owned())
    }

    /// Preprocessed crops of every slice with their translations.
    pub fn translate_scaled(&self, vol: &CtVolume, direction: Direction) -> Result<Vec<ScaledPair>> {
        let [h, w, _] = vol.dims();
        let (r, c, ch, cw) = self.window(h, w)?;
        let g = self.generator(direction);
        masked_scaled_slices(vol, self.mask_mode)?
            .into_iter()
            .map(|full| {
                let input = full.slice(s![r..r + ch, c..c + cw]).to_owned();
                let output = Self::run(g, input.view())?;
                Ok(ScaledPair { input, output })
            })
            .collect()
    }

    /// Crops and their round trips through both generators, starting with
    /// the one for `direction`.
    pub fn cycle_scaled(&self, vol: &CtVolume, direction: Direction) -> Result<Vec<ScaledPair>> {
        let back = self.generator(match direction {
            Direction::CToP => Direction::PToC,
            Direction::PToC => Direction::CToP,
        });
        self.translate_scaled(vol, direction)?
            .into_iter()
            .map(|p| {
                let output = Self::run(back, p.output.view())?;
                Ok(ScaledPair { input: p.input, output })
            })
            .collect()
    }

    /// Unscales network outputs and embeds them in an air-filled canvas.
    fn embed(&self, vol: &CtVolume, outputs: impl Iterator<Item = Array2<f32>>, modality: Modality) -> Result<CtVolume> {
        let [h, w, d] = vol.dims();
        let (r, c, ch, cw) = self.window(h, w)?;
        let mut voxels = Array3::from_elem((d, h, w), AIR_HU);
        for (k, out) in outputs.enumerate() {
            voxels
                .slice_mut(s![k, r..r + ch, c..c + cw])
                .assign(&unscale(out.mapv(|v| v.clamp(-1.0, 1.0)).view())?);
        }
        vol.with_voxels(voxels, modality)
    }

    /// The translated volume in HU, same dimensions as `vol`.
    pub fn translate_volume(&self, vol: &CtVolume, direction: Direction) -> Result<CtVolume> {
        let pairs = self.translate_scaled(vol, direction)?;
        let modality = match direction {
            Direction::CToP => Modality::SynPlanCt,
            Direction::PToC => Modality::Cbct,
        };
        self.embed(vol, pairs.into_iter().map(|p| p.output), modality)
    }

    /// `G_PC(G_CP(x))` (or the reverse) in HU, same dimensions as `vol`.
    pub fn cycle_translate(&self, vol: &CtVolume, direction: Direction) -> Result<CtVolume> {
        let pairs = self.cycle_scaled(vol, direction)?;
        self.embed(vol, pairs.into_iter().map(|p| p.output), vol.modality)
    }

    /// The preprocessed input (mask, clip, crop) as an HU volume, the
    /// reference against which cycle outputs are compared.
    pub fn preprocessed(&self, vol: &CtVolume) -> Result<CtVolume> {
        let pairs = self.translate_scaled_inputs(vol)?;
        self.embed(vol, pairs.into_iter(), vol.modality)
    }

    fn translate_scaled_inputs(&self, vol: &CtVolume) -> Result<Vec<Array2<f32>>> {
        let [h, w, _] = vol.dims();
        let (r, c, ch, cw) = self.window(h, w)?;
        Ok(masked_scaled_slices(vol, self.mask_mode)?
            .into_iter()
            .map(|full| full.slice(s![r..r + ch, c..c + cw]).to_owned())
            .collect())
    }
}

/// Loads the checkpoint and input, translates, writes the output volume.
pub fn run_job(job: &TranslationJob) -> Result<(CtVolume, TranslationStats)> {
    let translator = Translator::from_checkpoint(&job.checkpoint)?
        .with_crop(job.crop)
        .with_mask_mode(job.mask_mode);
    let input = load_volume(&job.input)?;
    let start = Instant::now();
    let out = translator.translate_volume(&input, job.direction)?;
    let seconds = start.elapsed().as_secs_f64();
    save_volume(&out, &job.output)?;
    let slices = input.n_slices();
    Ok((
        out,
        TranslationStats {
            slices,
            seconds,
            slices_per_second: slices as f64 / seconds.max(1e-9),
        },
    ))
}

/// Dice overlap of the air masks (`value < threshold`, scaled units).
pub fn air_dice(a: ArrayView2<f32>, b: ArrayView2<f32>, threshold: f32) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    crate::evaluation::dice(a.mapv(|v| v < threshold).view(), b.mapv(|v| v < threshold).view())
}
