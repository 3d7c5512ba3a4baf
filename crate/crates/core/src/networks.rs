//! Generator and discriminator architectures.
//!
//! Both networks are described declaratively ([`GeneratorSpec`],
//! [`DiscriminatorSpec`]); the runtime networks, their parameter counts, and
//! the discriminator's receptive field are all derived from those specs.
//!
//! Generator layout (defaults):
//!
//! ```text
//! stem   7x7 s1 -> 32        (pads with the air value -1)
//! down   3x3 s2 -> 32, 64, 128
//! res    9 x residual 3x3    (latent noise after block 4 while training)
//! up     unpool x2 + residual -> 64 (+ down2), 32 (+ down1), 32 (+ stem)
//! head   7x7 s1 -> 1, tanh
//! ```

use ndarray::{Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    upsample2, upsample2_backward, Activation, Conv2d, ConvUnit, GradStore, Normalization,
    PadMode, Tensor, UnitCache,
};
use crate::optim::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DownConv,
    ResidualBlock,
    UnpoolResidual,
}

/// One entry of a declarative network description.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
    pub normalization: Normalization,
    pub activation: Activation,
}

impl LayerSpec {
    fn validate(&self) -> Result<()> {
        if !(self.kernel % 2 == 1 || self.kernel == 4) {
            return Err(Error::invalid("kernel", format!("{} is neither odd nor 4", self.kernel)));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::invalid("stride", format!("{} not in {{1, 2}}", self.stride)));
        }
        if self.out_channels == 0 {
            return Err(Error::invalid("out_channels", "must be positive"));
        }
        Ok(())
    }

    /// Parameters of this layer given its input channel count. Normalization
    /// contributes nothing: it carries no affine terms.
    fn parameter_count(&self, in_channels: usize) -> usize {
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        match self.kind {
            LayerKind::Conv | LayerKind::DownConv => conv(in_channels, self.out_channels, self.kernel),
            LayerKind::ResidualBlock | LayerKind::UnpoolResidual => {
                let main = conv(in_channels, self.out_channels, self.kernel)
                    + conv(self.out_channels, self.out_channels, self.kernel);
                let projection = if in_channels == self.out_channels {
                    0
                } else {
                    conv(in_channels, self.out_channels, 1)
                };
                main + projection
            }
        }
    }
}

fn count_parameters(layers: &[LayerSpec]) -> usize {
    let mut in_channels = 1;
    let mut total = 0;
    for layer in layers {
        total += layer.parameter_count(in_channels);
        in_channels = layer.out_channels;
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub stem_kernel: usize,
    pub stem_channels: usize,
    /// Constant used to pad the stem input; the scaled intensity of air.
    pub stem_pad_value: f32,
    pub down_kernel: usize,
    pub down_channels: Vec<usize>,
    pub residual_blocks: usize,
    pub residual_kernel: usize,
    pub head_kernel: usize,
    pub latent_noise_sd: f32,
    /// Noise is added to the output of this many residual blocks.
    pub noise_after_block: usize,
    pub init_sd: f32,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            stem_kernel: 7,
            stem_channels: 32,
            stem_pad_value: -1.0,
            down_kernel: 3,
            down_channels: vec![32, 64, 128],
            residual_blocks: 9,
            residual_kernel: 3,
            head_kernel: 7,
            latent_noise_sd: 0.05,
            noise_after_block: 4,
            init_sd: 0.02,
        }
    }
}

impl GeneratorSpec {
    /// Channel count of each decoder stage, fixed by the skip connection it merges with.
    pub fn up_channels(&self) -> Vec<usize> {
        let mut skips = vec![self.stem_channels];
        skips.extend(&self.down_channels[..self.down_channels.len().saturating_sub(1)]);
        skips.reverse();
        skips
    }

    /// Spatial dims must be divisible by this factor.
    pub fn size_multiple(&self) -> usize {
        1 << self.down_channels.len()
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let unit = |kind, kernel, stride, out_channels| LayerSpec {
            kind,
            kernel,
            stride,
            out_channels,
            normalization: Normalization::InstanceNoAffine,
            activation: Activation::Relu,
        };
        let mut layers = vec![unit(LayerKind::Conv, self.stem_kernel, 1, self.stem_channels)];
        for &c in &self.down_channels {
            layers.push(unit(LayerKind::DownConv, self.down_kernel, 2, c));
        }
        let bottleneck = *self.down_channels.last().unwrap_or(&self.stem_channels);
        for _ in 0..self.residual_blocks {
            layers.push(unit(LayerKind::ResidualBlock, self.residual_kernel, 1, bottleneck));
        }
        for c in self.up_channels() {
            layers.push(unit(LayerKind::UnpoolResidual, self.residual_kernel, 1, c));
        }
        layers.push(LayerSpec {
            kind: LayerKind::Conv,
            kernel: self.head_kernel,
            stride: 1,
            out_channels: 1,
            normalization: Normalization::None,
            activation: Activation::Tanh,
        });
        layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.down_channels.is_empty() {
            return Err(Error::invalid("down_channels", "at least one down convolution is required"));
        }
        if self.noise_after_block > self.residual_blocks {
            return Err(Error::invalid(
                "noise_after_block",
                format!("{} exceeds {} residual blocks", self.noise_after_block, self.residual_blocks),
            ));
        }
        if self.latent_noise_sd < 0.0 || self.init_sd < 0.0 {
            return Err(Error::invalid("latent_noise_sd", "standard deviations must be non-negative"));
        }
        let layers = self.layers();
        for layer in &layers {
            layer.validate()?;
        }
        let last = layers.last().expect("head layer");
        if last.activation != Activation::Tanh || last.normalization != Normalization::None {
            return Err(Error::invalid("head", "last layer must be tanh without normalization"));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        count_parameters(&self.layers())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub layers: Vec<LayerSpec>,
    pub pad: PadMode,
    pub init_sd: f32,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        let lrelu = Activation::LeakyRelu(0.2);
        let layer = |kind, stride, out_channels| LayerSpec {
            kind,
            kernel: 4,
            stride,
            out_channels,
            normalization: Normalization::InstanceNoAffine,
            activation: lrelu,
        };
        DiscriminatorSpec {
            layers: vec![
                layer(LayerKind::Conv, 1, 32),
                layer(LayerKind::DownConv, 2, 64),
                layer(LayerKind::DownConv, 2, 128),
                layer(LayerKind::DownConv, 2, 256),
                layer(LayerKind::Conv, 1, 256),
                LayerSpec {
                    kind: LayerKind::Conv,
                    kernel: 4,
                    stride: 1,
                    out_channels: 1,
                    normalization: Normalization::None,
                    activation: Activation::None,
                },
            ],
            pad: PadMode::Reflect,
            init_sd: 0.02,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("layers", "discriminator needs at least one layer"));
        }
        for layer in &self.layers {
            layer.validate()?;
            if !matches!(layer.kind, LayerKind::Conv | LayerKind::DownConv) {
                return Err(Error::invalid("layers", "discriminator layers must be convolutions"));
            }
        }
        if self.layers.last().map(|l| l.out_channels) != Some(1) {
            return Err(Error::invalid("layers", "last layer must emit one score channel"));
        }
        Ok(())
    }

    pub fn kernel_strides(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.kernel, l.stride)).collect()
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.kernel_strides())
    }

    pub fn downsampling(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn parameter_count(&self) -> usize {
        count_parameters(&self.layers)
    }
}

/// Receptive field (in input pixels) of a chain of `(kernel, stride)` layers.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    let mut rf = 1;
    let mut jump = 1;
    for &(kernel, stride) in layers {
        rf += (kernel - 1) * jump;
        jump *= stride;
    }
    rf
}

fn check_dims(x: &Tensor, multiple: usize) -> Result<()> {
    let (c, h, w) = x.dim();
    if c != 1 {
        return Err(Error::invalid("input", format!("expected 1 channel, got {c}")));
    }
    if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
        return Err(Error::invalid(
            "input",
            format!("{h}x{w} is not a positive multiple of {multiple}"),
        ));
    }
    Ok(())
}

/// Applies `f` to every image of a `(batch, 1, rows, cols)` array.
fn map_batch(x: &Array4<f32>, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Array4<f32>> {
    let outputs = x
        .outer_iter()
        .map(|img| f(&img.to_owned()))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = outputs.iter().map(|o| o.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).expect("uniform output shapes"))
}

/// Residual block: conv-norm-relu-conv-norm plus identity (or a 1x1
/// projection when the channel count changes).
#[derive(Clone, Debug)]
struct ResBlock {
    first: ConvUnit,
    second: ConvUnit,
    projection: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct ResCache {
    input: Tensor,
    first: UnitCache,
    second: UnitCache,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(ids: &mut usize, in_c: usize, out_c: usize, k: usize, init_sd: f32, rng: &mut R) -> Self {
        let mut conv = |i, o, k| {
            let c = Conv2d::new(*ids, i, o, k, 1, PadMode::Reflect, init_sd, rng);
            *ids += 1;
            c
        };
        let first = ConvUnit {
            conv: conv(in_c, out_c, k),
            norm: Normalization::InstanceNoAffine,
            act: Activation::Relu,
        };
        let second = ConvUnit {
            conv: conv(out_c, out_c, k),
            norm: Normalization::InstanceNoAffine,
            act: Activation::None,
        };
        let projection = (in_c != out_c).then(|| conv(in_c, out_c, 1));
        ResBlock { first, second, projection }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, ResCache) {
        let (h, first) = self.first.forward(x);
        let (mut y, second) = self.second.forward(&h);
        match &self.projection {
            Some(p) => y += &p.forward(x),
            None => y += x,
        }
        (
            y,
            ResCache {
                input: x.clone(),
                first,
                second,
            },
        )
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut y = self.second.infer(&self.first.infer(x));
        match &self.projection {
            Some(p) => y += &p.forward(x),
            None => y += x,
        }
        y
    }

    fn backward(&self, cache: &ResCache, grad: &Tensor, grads: &mut GradStore) -> Tensor {
        let g = self.second.backward(&cache.second, grad, Some(grads));
        let mut gx = self.first.backward(&cache.first, &g, Some(grads));
        match &self.projection {
            Some(p) => gx += &p.backward(&cache.input, grad, Some(grads)),
            None => gx += grad,
        }
        gx
    }

    fn convs(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.first.conv, &self.second.conv];
        v.extend(self.projection.iter());
        v
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v = vec![&mut self.first.conv, &mut self.second.conv];
        v.extend(self.projection.iter_mut());
        v
    }
}

#[derive(Clone, Debug)]
struct EncoderDecoder {
    stem: ConvUnit,
    down: Vec<ConvUnit>,
    res: Vec<ResBlock>,
    up: Vec<ResBlock>,
    head: ConvUnit,
}

/// Intermediate values of one training-mode generator pass.
#[derive(Clone, Debug, Default)]
pub struct GeneratorTrace {
    stem: Option<UnitCache>,
    down: Vec<UnitCache>,
    res: Vec<ResCache>,
    up: Vec<ResCache>,
    head: Option<UnitCache>,
}

impl EncoderDecoder {
    fn new<R: Rng + ?Sized>(spec: &GeneratorSpec, rng: &mut R) -> Self {
        let mut ids = 0usize;
        let mut unit = |i, o, k, stride, pad, norm, act, rng: &mut R| {
            let u = ConvUnit {
                conv: Conv2d::new(ids, i, o, k, stride, pad, spec.init_sd, rng),
                norm,
                act,
            };
            ids += 1;
            u
        };
        let inorm = Normalization::InstanceNoAffine;
        let stem = unit(
            1,
            spec.stem_channels,
            spec.stem_kernel,
            1,
            PadMode::Constant(spec.stem_pad_value),
            inorm,
            Activation::Relu,
            rng,
        );
        let mut down = Vec::new();
        let mut c = spec.stem_channels;
        for &o in &spec.down_channels {
            down.push(unit(c, o, spec.down_kernel, 2, PadMode::Reflect, inorm, Activation::Relu, rng));
            c = o;
        }
        let mut res = Vec::new();
        for _ in 0..spec.residual_blocks {
            res.push(ResBlock::new(&mut ids, c, c, spec.residual_kernel, spec.init_sd, rng));
        }
        let mut up = Vec::new();
        for o in spec.up_channels() {
            up.push(ResBlock::new(&mut ids, c, o, spec.residual_kernel, spec.init_sd, rng));
            c = o;
        }
        let head = ConvUnit {
            conv: Conv2d::new(ids, c, 1, spec.head_kernel, 1, PadMode::Reflect, spec.init_sd, rng),
            norm: Normalization::None,
            act: Activation::Tanh,
        };
        EncoderDecoder { stem, down, res, up, head }
    }

    fn convs(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.stem.conv];
        v.extend(self.down.iter().map(|u| &u.conv));
        for b in self.res.iter().chain(&self.up) {
            v.extend(b.convs());
        }
        v.push(&self.head.conv);
        v
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v = vec![&mut self.stem.conv];
        v.extend(self.down.iter_mut().map(|u| &mut u.conv));
        for b in self.res.iter_mut().chain(self.up.iter_mut()) {
            v.extend(b.convs_mut());
        }
        v.push(&mut self.head.conv);
        v
    }

    /// Shared forward; `noise` supplies the latent perturbation in training mode.
    fn run(&self, x: &Tensor, noise_at: usize, mut noise: Option<&mut dyn FnMut(&mut Tensor)>, trace: Option<&mut GeneratorTrace>) -> Tensor {
        let mut local = GeneratorTrace::default();
        let record = trace.is_some();
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = if record {
            let (y, c) = self.stem.forward(x);
            local.stem = Some(c);
            y
        } else {
            self.stem.infer(x)
        };
        for unit in &self.down {
            skips.push(h.clone());
            h = if record {
                let (y, c) = unit.forward(&h);
                local.down.push(c);
                y
            } else {
                unit.infer(&h)
            };
        }
        for (i, block) in self.res.iter().enumerate() {
            if i == noise_at {
                if let Some(f) = noise.as_mut() {
                    f(&mut h);
                }
            }
            h = if record {
                let (y, c) = block.forward(&h);
                local.res.push(c);
                y
            } else {
                block.infer(&h)
            };
        }
        if noise_at == self.res.len() {
            if let Some(f) = noise.as_mut() {
                f(&mut h);
            }
        }
        for block in &self.up {
            let up = upsample2(&h);
            h = if record {
                let (y, c) = block.forward(&up);
                local.up.push(c);
                y
            } else {
                block.infer(&up)
            };
            h += &skips.pop().expect("one skip per decoder stage");
        }
        let out = if record {
            let (y, c) = self.head.forward(&h);
            local.head = Some(c);
            y
        } else {
            self.head.infer(&h)
        };
        if let Some(t) = trace {
            *t = local;
        }
        out
    }

    fn backward(&self, trace: &GeneratorTrace, grad: &Tensor, grads: &mut GradStore) -> Tensor {
        let head = trace.head.as_ref().expect("training trace");
        let mut g = self.head.backward(head, grad, Some(grads));
        // Gradients flowing into each encoder feature through its skip connection.
        let mut skip_grads = Vec::with_capacity(self.up.len());
        for (block, cache) in self.up.iter().zip(&trace.up).rev() {
            skip_grads.push(g.clone());
            g = upsample2_backward(&block.backward(cache, &g, grads));
        }
        for (block, cache) in self.res.iter().zip(&trace.res).rev() {
            g = block.backward(cache, &g, grads);
        }
        // skip_grads[0] belongs to the stem output, the last one to the deepest skip.
        for (i, (unit, cache)) in self.down.iter().zip(&trace.down).enumerate().rev() {
            g = unit.backward(cache, &g, Some(grads));
            g += &skip_grads[i];
        }
        let stem = trace.stem.as_ref().expect("training trace");
        self.stem.backward(stem, &g, Some(grads))
    }
}

/// A generator network with its gradient buffers.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    net: Option<EncoderDecoder>,
    pub grads: GradStore,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(spec: GeneratorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let net = EncoderDecoder::new(&spec, rng);
        let grads = GradStore::for_convs(net.convs());
        Ok(Generator {
            spec,
            net: Some(net),
            grads,
        })
    }

    /// A parameter-free generator that returns its input unchanged.
    ///
    /// Used as a known fixed point when checking the cycle and failure
    /// diagnostics; it is never trained.
    pub fn identity(spec: GeneratorSpec) -> Self {
        Generator {
            spec,
            net: None,
            grads: GradStore::default(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.net.is_none()
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn parameter_count(&self) -> usize {
        self.convs().iter().map(|c| c.parameter_count()).sum()
    }

    pub fn convs(&self) -> Vec<&Conv2d> {
        self.net.as_ref().map(|n| n.convs()).unwrap_or_default()
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        self.net.as_mut().map(|n| n.convs_mut()).unwrap_or_default()
    }

    /// One optimizer update from the accumulated gradients.
    pub fn apply_update(&mut self, opt: &mut Adam, lr: f32) {
        let convs = self.net.as_mut().map(|n| n.convs_mut()).unwrap_or_default();
        opt.step(convs, &self.grads, lr);
    }

    /// Evaluation-mode forward pass (no latent noise) on a `(1, rows, cols)` image.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_dims(x, self.spec.size_multiple())?;
        Ok(match &self.net {
            Some(net) => net.run(x, self.spec.noise_after_block, None, None),
            None => x.clone(),
        })
    }

    /// Evaluation-mode forward pass over a `(batch, 1, rows, cols)` array.
    pub fn forward_batch(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        map_batch(x, |img| self.forward(img))
    }

    /// Training-mode forward pass: injects latent noise and records a trace.
    pub fn forward_train<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<(Tensor, GeneratorTrace)> {
        check_dims(x, self.spec.size_multiple())?;
        let mut trace = GeneratorTrace::default();
        let out = match &self.net {
            Some(net) => {
                let sd = self.spec.latent_noise_sd;
                let mut add_noise = |h: &mut Tensor| {
                    if sd > 0.0 {
                        let normal = Normal::new(0.0f32, sd).expect("valid noise sd");
                        h.mapv_inplace(|v| v + normal.sample(rng));
                    }
                };
                net.run(x, self.spec.noise_after_block, Some(&mut add_noise), Some(&mut trace))
            }
            None => x.clone(),
        };
        Ok((out, trace))
    }

    /// Back-propagates `grad` through a recorded pass, accumulating parameter
    /// gradients into [`Generator::grads`]; returns the input gradient.
    pub fn backward(&mut self, trace: &GeneratorTrace, grad: &Tensor) -> Tensor {
        match &self.net {
            Some(net) => net.backward(trace, grad, &mut self.grads),
            None => grad.clone(),
        }
    }
}

/// A patch discriminator with its gradient buffers.
#[derive(Clone, Debug)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    units: Vec<ConvUnit>,
    pub grads: GradStore,
}

#[derive(Clone, Debug, Default)]
pub struct DiscriminatorTrace {
    units: Vec<UnitCache>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(spec: DiscriminatorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut in_c = 1;
        let mut units = Vec::new();
        for (id, layer) in spec.layers.iter().enumerate() {
            units.push(ConvUnit {
                conv: Conv2d::new(id, in_c, layer.out_channels, layer.kernel, layer.stride, spec.pad, spec.init_sd, rng),
                norm: layer.normalization,
                act: layer.activation,
            });
            in_c = layer.out_channels;
        }
        let grads = GradStore::for_convs(units.iter().map(|u| &u.conv));
        Ok(Discriminator { spec, units, grads })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn parameter_count(&self) -> usize {
        self.units.iter().map(|u| u.conv.parameter_count()).sum()
    }

    pub fn convs(&self) -> Vec<&Conv2d> {
        self.units.iter().map(|u| &u.conv).collect()
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        self.units.iter_mut().map(|u| &mut u.conv).collect()
    }

    pub fn apply_update(&mut self, opt: &mut Adam, lr: f32) {
        let convs = self.units.iter_mut().map(|u| &mut u.conv).collect();
        opt.step(convs, &self.grads, lr);
    }

    /// Score map `(1, rows / 8, cols / 8)` for a `(1, rows, cols)` image.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_dims(x, self.spec.downsampling())?;
        Ok(self.units.iter().fold(x.clone(), |h, u| u.infer(&h)))
    }

    pub fn forward_batch(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        map_batch(x, |img| self.forward(img))
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, DiscriminatorTrace)> {
        check_dims(x, self.spec.downsampling())?;
        let mut trace = DiscriminatorTrace::default();
        let mut h = x.clone();
        for unit in &self.units {
            let (y, cache) = unit.forward(&h);
            trace.units.push(cache);
            h = y;
        }
        Ok((h, trace))
    }

    /// Returns the input gradient; parameter gradients are accumulated only
    /// when `accumulate` is set (the generator update needs input gradients only).
    pub fn backward(&mut self, trace: &DiscriminatorTrace, grad: &Tensor, accumulate: bool) -> Tensor {
        let mut g = grad.clone();
        for (unit, cache) in self.units.iter().zip(&trace.units).rev() {
            let grads = accumulate.then_some(&mut self.grads);
            g = unit.backward(cache, &g, grads);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_shape_simple_fn((1, h, w), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn default_discriminator_receptive_field_is_73() {
        assert_eq!(receptive_field(&[(4, 1), (4, 2), (4, 2), (4, 2), (4, 1), (4, 1)]), 73);
        assert_eq!(DiscriminatorSpec::default().receptive_field(), 73);
    }

    #[test]
    fn receptive_field_small_cases() {
        assert_eq!(receptive_field(&[(3, 1)]), 3);
        assert_eq!(receptive_field(&[(3, 2), (3, 1)]), 7);
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let mut r = rng(1);
        let g = Generator::new(GeneratorSpec::default(), &mut r).unwrap();
        for &(h, w) in &[(16, 16), (24, 40), (48, 32)] {
            let x = random_image(&mut r, h, w);
            let y = g.forward(&x).unwrap();
            assert_eq!(y.dim(), (1, h, w));
            assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generator_rejects_sizes_not_divisible_by_eight() {
        let mut r = rng(1);
        let g = Generator::new(GeneratorSpec::default(), &mut r).unwrap();
        assert!(g.forward(&Tensor::zeros((1, 20, 16))).is_err());
        let d = Discriminator::new(DiscriminatorSpec::default(), &mut r).unwrap();
        assert!(d.forward(&Tensor::zeros((1, 16, 12))).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic_and_train_forward_is_noisy() {
        let mut r = rng(2);
        let g = Generator::new(GeneratorSpec::default(), &mut r).unwrap();
        let x = random_image(&mut r, 16, 24);
        assert_eq!(g.forward(&x).unwrap(), g.forward(&x).unwrap());
        let (a, _) = g.forward_train(&x, &mut r).unwrap();
        let (b, _) = g.forward_train(&x, &mut r).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn discriminator_score_map_is_eighth_size() {
        let mut r = rng(3);
        let d = Discriminator::new(DiscriminatorSpec::default(), &mut r).unwrap();
        let x = random_image(&mut r, 48, 32);
        assert_eq!(d.forward(&x).unwrap().dim(), (1, 6, 4));
        let wide = random_image(&mut r, 48, 64);
        assert_eq!(d.forward(&wide).unwrap().dim(), (1, 6, 8));
    }

    #[test]
    fn zero_weight_discriminator_scores_zero() {
        let spec = DiscriminatorSpec {
            init_sd: 0.0,
            ..DiscriminatorSpec::default()
        };
        let mut r = rng(4);
        let d = Discriminator::new(spec, &mut r).unwrap();
        let x = random_image(&mut r, 32, 32);
        assert!(d.forward(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_counts_exclude_normalization() {
        let mut r = rng(5);
        let gspec = GeneratorSpec::default();
        let g = Generator::new(gspec.clone(), &mut r).unwrap();
        assert_eq!(g.parameter_count(), gspec.parameter_count());
        let dspec = DiscriminatorSpec::default();
        let d = Discriminator::new(dspec.clone(), &mut r).unwrap();
        // conv weights + biases only: 1*32*16+32, 32*64*16+64, 64*128*16+128,
        // 128*256*16+256, 256*256*16+256, 256*1*16+1
        let expected = (512 + 32) + (32768 + 64) + (131072 + 128) + (524288 + 256) + (1048576 + 256) + (4096 + 1);
        assert_eq!(d.parameter_count(), expected);
        assert_eq!(dspec.parameter_count(), expected);
    }

    #[test]
    fn spec_validation_rejects_bad_layers() {
        let mut spec = DiscriminatorSpec::default();
        spec.layers[0].kernel = 6;
        assert!(spec.validate().is_err());
        let mut spec = DiscriminatorSpec::default();
        spec.layers[1].stride = 3;
        assert!(spec.validate().is_err());
        let spec = GeneratorSpec {
            noise_after_block: 12,
            ..GeneratorSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    /// Finite-difference check of the full generator backward on a tiny net.
    #[test]
    fn generator_backward_matches_finite_differences() {
        let spec = GeneratorSpec {
            stem_channels: 4,
            down_channels: vec![4, 6],
            residual_blocks: 2,
            noise_after_block: 1,
            latent_noise_sd: 0.0,
            init_sd: 0.3,
            ..GeneratorSpec::default()
        };
        let mut r = rng(6);
        let mut g = Generator::new(spec, &mut r).unwrap();
        let x = random_image(&mut r, 8, 8);
        let (y, trace) = g.forward_train(&x, &mut r).unwrap();
        let probe = random_image(&mut r, 8, 8);
        g.grads.zero();
        let gx = g.backward(&trace, &probe);
        let objective = |net: &Generator, xx: &Tensor| -> f64 {
            let yy = net.forward(xx).unwrap();
            yy.iter().zip(probe.iter()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        assert_eq!(y.dim(), (1, 8, 8));
        let h = 1e-2f32;
        for idx in [(0, 0, 0), (0, 3, 4), (0, 7, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (objective(&g, &xp) - objective(&g, &xm)) / (2.0 * h as f64);
            assert!((fd - gx[idx] as f64).abs() < 3e-2 * (1.0 + fd.abs()), "input {idx:?}: {fd} vs {}", gx[idx]);
        }
        let n_convs = g.convs().len();
        for conv_id in [0, n_convs / 2, n_convs - 1] {
            let an = g.grads.weights[conv_id][[0, 1]] as f64;
            let mut gp = g.clone();
            gp.convs_mut()[conv_id].weight[[0, 1]] += h;
            let mut gm = g.clone();
            gm.convs_mut()[conv_id].weight[[0, 1]] -= h;
            let fd = (objective(&gp, &x) - objective(&gm, &x)) / (2.0 * h as f64);
            assert!((fd - an).abs() < 3e-2 * (1.0 + fd.abs()), "conv {conv_id}: {fd} vs {an}");
        }
    }
}
