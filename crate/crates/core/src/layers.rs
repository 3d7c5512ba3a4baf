//! Trainable building blocks with hand-written backward passes.
//!
//! Activations are `(channels, rows, cols)` tensors for a single image; the
//! trainer uses batch size 1, so batching is handled by the callers.
//! Every `forward` returns the output together with the cache its matching
//! `backward` consumes. Parameter gradients are accumulated into a
//! [`GradStore`] that is owned by the network, not by the layer, so the same
//! layer can be back-propagated through several cached forward passes.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A single-image activation tensor, `(channels, rows, cols)`.
pub type Tensor = Array3<f32>;

const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// Mirror without repeating the edge sample (`d c b | a b c d`).
    Reflect,
    /// Fill with a fixed value.
    Constant(f32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Per-image, per-channel standardization with no learned scale or shift.
    InstanceNoAffine,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Tanh,
    None,
}

/// Same-padding split `(before, after)` for one axis.
///
/// The output length is `ceil(size / stride)`; when the total padding is odd
/// the extra sample goes after.
pub fn same_padding(size: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(size);
    (total / 2, total - total / 2)
}

/// Source index for padded position `i` under reflect padding of a length-`n` axis.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Padding geometry for one 2D tensor.
#[derive(Clone, Debug)]
struct Padding {
    rows: (usize, usize),
    cols: (usize, usize),
    mode: PadMode,
}

impl Padding {
    fn is_none(&self) -> bool {
        self.rows == (0, 0) && self.cols == (0, 0)
    }

    /// Map from padded position to source position, `None` for constant fill.
    fn index_map(&self, before: usize, after: usize, n: usize) -> Vec<Option<usize>> {
        (0..before + n + after)
            .map(|p| {
                let i = p as isize - before as isize;
                if (0..n as isize).contains(&i) {
                    Some(i as usize)
                } else {
                    match self.mode {
                        PadMode::Reflect => Some(reflect_index(i, n)),
                        PadMode::Constant(_) => None,
                    }
                }
            })
            .collect()
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        if self.is_none() {
            return x.clone();
        }
        let (c, h, w) = x.dim();
        let rmap = self.index_map(self.rows.0, self.rows.1, h);
        let cmap = self.index_map(self.cols.0, self.cols.1, w);
        let fill = match self.mode {
            PadMode::Constant(v) => v,
            PadMode::Reflect => 0.0,
        };
        let mut out = Tensor::from_elem((c, rmap.len(), cmap.len()), fill);
        for ch in 0..c {
            let src = x.index_axis(Axis(0), ch);
            let mut dst = out.index_axis_mut(Axis(0), ch);
            for (pr, r) in rmap.iter().enumerate() {
                let Some(r) = *r else { continue };
                for (pc, col) in cmap.iter().enumerate() {
                    if let Some(col) = *col {
                        dst[[pr, pc]] = src[[r, col]];
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Padding::apply`]: folds padded gradients back onto the source grid.
    fn fold(&self, grad: &Tensor, h: usize, w: usize) -> Tensor {
        if self.is_none() {
            return grad.clone();
        }
        let c = grad.dim().0;
        let rmap = self.index_map(self.rows.0, self.rows.1, h);
        let cmap = self.index_map(self.cols.0, self.cols.1, w);
        let mut out = Tensor::zeros((c, h, w));
        for ch in 0..c {
            let src = grad.index_axis(Axis(0), ch);
            let mut dst = out.index_axis_mut(Axis(0), ch);
            for (pr, r) in rmap.iter().enumerate() {
                let Some(r) = *r else { continue };
                for (pc, col) in cmap.iter().enumerate() {
                    if let Some(col) = *col {
                        dst[[r, col]] += src[[pr, pc]];
                    }
                }
            }
        }
        out
    }
}

/// Gradient buffers for every convolution of one network, indexed by conv id.
#[derive(Clone, Debug, Default)]
pub struct GradStore {
    pub weights: Vec<Array2<f32>>,
    pub biases: Vec<Array1<f32>>,
}

impl GradStore {
    pub fn for_convs<'a>(convs: impl IntoIterator<Item = &'a Conv2d>) -> Self {
        let mut store = GradStore::default();
        for conv in convs {
            store.weights.push(Array2::zeros(conv.weight.raw_dim()));
            store.biases.push(Array1::zeros(conv.bias.raw_dim()));
        }
        store
    }

    pub fn zero(&mut self) {
        self.weights.iter_mut().for_each(|w| w.fill(0.0));
        self.biases.iter_mut().for_each(|b| b.fill(0.0));
    }

    pub fn squared_norm(&self) -> f64 {
        let w: f64 = self
            .weights
            .iter()
            .flat_map(|w| w.iter())
            .map(|&g| (g as f64).powi(2))
            .sum();
        let b: f64 = self
            .biases
            .iter()
            .flat_map(|b| b.iter())
            .map(|&g| (g as f64).powi(2))
            .sum();
        w + b
    }
}

/// 2D convolution (cross-correlation) with same-padding.
///
/// The weight is stored flattened as `(out_channels, in_channels * k * k)`,
/// which is the layout the im2col product needs.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub id: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: PadMode,
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Conv2d {
    /// New convolution with weights drawn from `Normal(0, init_sd)` and zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        id: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: PadMode,
        init_sd: f32,
        rng: &mut R,
    ) -> Self {
        let fan = in_channels * kernel * kernel;
        let weight = if init_sd > 0.0 {
            let normal = Normal::new(0.0f32, init_sd).expect("positive init sd");
            Array2::from_shape_simple_fn((out_channels, fan), || normal.sample(rng))
        } else {
            Array2::zeros((out_channels, fan))
        };
        Conv2d {
            id,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight,
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn output_size(&self, rows: usize, cols: usize) -> (usize, usize) {
        (rows.div_ceil(self.stride), cols.div_ceil(self.stride))
    }

    fn padding(&self, rows: usize, cols: usize) -> Padding {
        Padding {
            rows: same_padding(rows, self.kernel, self.stride),
            cols: same_padding(cols, self.kernel, self.stride),
            mode: self.pad,
        }
    }

    fn im2col(&self, padded: &Tensor, out_rows: usize, out_cols: usize) -> Array2<f32> {
        let (c, _, pw) = padded.dim();
        let k = self.kernel;
        let s = self.stride;
        let positions = out_rows * out_cols;
        let mut col = Array2::<f32>::zeros((c * k * k, positions));
        let src = padded.as_slice().expect("standard layout");
        let plane = padded.dim().1 * pw;
        let dst = col.as_slice_mut().expect("standard layout");
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let dst_row = &mut dst[row * positions..(row + 1) * positions];
                    for oy in 0..out_rows {
                        let base = ch * plane + (oy * s + ki) * pw + kj;
                        let out = &mut dst_row[oy * out_cols..(oy + 1) * out_cols];
                        if s == 1 {
                            out.copy_from_slice(&src[base..base + out_cols]);
                        } else {
                            for (ox, v) in out.iter_mut().enumerate() {
                                *v = src[base + ox * s];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &Array2<f32>, padded_dim: (usize, usize, usize), out_rows: usize, out_cols: usize) -> Tensor {
        let (c, ph, pw) = padded_dim;
        let k = self.kernel;
        let s = self.stride;
        let positions = out_rows * out_cols;
        let mut padded = Tensor::zeros((c, ph, pw));
        let dst = padded.as_slice_mut().expect("standard layout");
        let src = col.as_slice().expect("standard layout");
        let plane = ph * pw;
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let src_row = &src[row * positions..(row + 1) * positions];
                    for oy in 0..out_rows {
                        let base = ch * plane + (oy * s + ki) * pw + kj;
                        let g = &src_row[oy * out_cols..(oy + 1) * out_cols];
                        if s == 1 {
                            for (d, v) in dst[base..base + out_cols].iter_mut().zip(g) {
                                *d += v;
                            }
                        } else {
                            for (ox, v) in g.iter().enumerate() {
                                dst[base + ox * s] += v;
                            }
                        }
                    }
                }
            }
        }
        padded
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv {} input channels", self.id);
        let padded = self.padding(h, w).apply(x);
        let (oh, ow) = self.output_size(h, w);
        let col = self.im2col(&padded, oh, ow);
        let mut out = Array2::<f32>::zeros((self.out_channels, oh * ow));
        for (mut row, &b) in out.outer_iter_mut().zip(self.bias.iter()) {
            row.fill(b);
        }
        general_mat_mul(1.0, &self.weight, &col, 1.0, &mut out);
        out.into_shape_with_order((self.out_channels, oh, ow))
            .expect("contiguous conv output")
    }

    /// Gradient with respect to the input; parameter gradients are added to
    /// `grads` when given.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, grads: Option<&mut GradStore>) -> Tensor {
        let (_, h, w) = x.dim();
        let padding = self.padding(h, w);
        let (oh, ow) = self.output_size(h, w);
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels, oh * ow))
            .expect("contiguous gradient");
        let padded_dim = (
            self.in_channels,
            h + padding.rows.0 + padding.rows.1,
            w + padding.cols.0 + padding.cols.1,
        );
        if let Some(grads) = grads {
            let padded = padding.apply(x);
            let col = self.im2col(&padded, oh, ow);
            general_mat_mul(1.0, &g, &col.t(), 1.0, &mut grads.weights[self.id]);
            grads.biases[self.id] += &g.sum_axis(Axis(1));
        }
        let mut dcol = Array2::<f32>::zeros((self.in_channels * self.kernel * self.kernel, oh * ow));
        general_mat_mul(1.0, &self.weight.t(), &g, 0.0, &mut dcol);
        let dpadded = self.col2im(&dcol, padded_dim, oh, ow);
        padding.fold(&dpadded, h, w)
    }
}

/// Cache of an instance normalization: normalized values and per-channel 1/sd.
#[derive(Clone, Debug)]
pub struct NormCache {
    normalized: Tensor,
    inv_std: Vec<f32>,
}

pub fn instance_norm(x: &Tensor) -> (Tensor, NormCache) {
    let (c, h, w) = x.dim();
    let n = (h * w) as f32;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(c);
    for mut plane in out.outer_iter_mut() {
        let mean = plane.sum() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        plane.mapv_inplace(|v| (v - mean) * inv);
        inv_std.push(inv);
    }
    (
        out.clone(),
        NormCache {
            normalized: out,
            inv_std,
        },
    )
}

pub fn instance_norm_backward(cache: &NormCache, grad: &Tensor) -> Tensor {
    let (_, h, w) = grad.dim();
    let n = (h * w) as f32;
    let mut out = grad.clone();
    for ((mut g, xhat), &inv) in out
        .outer_iter_mut()
        .zip(cache.normalized.outer_iter())
        .zip(&cache.inv_std)
    {
        let mean_g = g.sum() / n;
        let mean_gx = g.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f32>() / n;
        ndarray::Zip::from(&mut g)
            .and(&xhat)
            .for_each(|gv, &xv| *gv = inv * (*gv - mean_g - xv * mean_gx));
    }
    out
}

pub fn activate(act: Activation, x: &mut Tensor) {
    match act {
        Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
        Activation::LeakyRelu(slope) => x.mapv_inplace(|v| if v > 0.0 { v } else { slope * v }),
        Activation::Tanh => x.mapv_inplace(f32::tanh),
        Activation::None => {}
    }
}

/// Backward of [`activate`], written in terms of the activation's output.
pub fn activate_backward(act: Activation, output: &Tensor, grad: &mut Tensor) {
    match act {
        Activation::Relu => ndarray::Zip::from(grad).and(output).for_each(|g, &y| {
            if y <= 0.0 {
                *g = 0.0
            }
        }),
        Activation::LeakyRelu(slope) => ndarray::Zip::from(grad).and(output).for_each(|g, &y| {
            if y <= 0.0 {
                *g *= slope
            }
        }),
        Activation::Tanh => ndarray::Zip::from(grad)
            .and(output)
            .for_each(|g, &y| *g *= 1.0 - y * y),
        Activation::None => {}
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (c, h, w) = x.dim();
    let mut out = Tensor::zeros((c, 2 * h, 2 * w));
    for di in 0..2 {
        for dj in 0..2 {
            out.slice_mut(s![.., di..;2, dj..;2]).assign(x);
        }
    }
    out
}

pub fn upsample2_backward(grad: &Tensor) -> Tensor {
    let (c, h, w) = grad.dim();
    let mut out = Tensor::zeros((c, h / 2, w / 2));
    for di in 0..2 {
        for dj in 0..2 {
            out += &grad.slice(s![.., di..;2, dj..;2]);
        }
    }
    out
}

/// Convolution followed by optional instance normalization and an activation.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub norm: Normalization,
    pub act: Activation,
}

#[derive(Clone, Debug)]
pub struct UnitCache {
    input: Tensor,
    norm: Option<NormCache>,
    output: Tensor,
}

impl UnitCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl ConvUnit {
    pub fn forward(&self, x: &Tensor) -> (Tensor, UnitCache) {
        let mut y = self.conv.forward(x);
        let norm = match self.norm {
            Normalization::InstanceNoAffine => {
                let (normed, cache) = instance_norm(&y);
                y = normed;
                Some(cache)
            }
            Normalization::None => None,
        };
        activate(self.act, &mut y);
        (
            y.clone(),
            UnitCache {
                input: x.clone(),
                norm,
                output: y,
            },
        )
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut y = self.conv.forward(x);
        if self.norm == Normalization::InstanceNoAffine {
            y = instance_norm(&y).0;
        }
        activate(self.act, &mut y);
        y
    }

    pub fn backward(&self, cache: &UnitCache, grad: &Tensor, grads: Option<&mut GradStore>) -> Tensor {
        let mut g = grad.clone();
        activate_backward(self.act, &cache.output, &mut g);
        if let Some(norm) = &cache.norm {
            g = instance_norm_backward(norm, &g);
        }
        self.conv.backward(&cache.input, &g, grads)
    }
}

/// Flattened 2D view of a single-channel tensor.
pub fn channel(x: &Tensor, c: usize) -> ArrayView2<'_, f32> {
    x.index_axis(Axis(0), c)
}
