//! Adversarial training of the two generators and two discriminators.
//!
//! One iteration draws an unpaired CBCT slice `x` and planning-CT slice `y`,
//! updates both discriminators on the current translations, then updates both
//! generators against the freshly updated discriminators.

mod checkpoint;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::layers::Tensor;
use crate::losses::*;
use crate::networks::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, GeneratorTrace};
use crate::optim::{Adam, AdamConfig};
use crate::preprocess::{center_crop, masked_scaled_slices, CropSpec, MaskMode};
use crate::volume::load_volume;

pub const LOG_NAME: &str = "train_log.csv";
pub const LOG_COLUMNS: [&str; 13] = [
    "iteration", "epoch", "lr", "cycle_a", "cycle_b", "adv", "tv", "air", "grad", "idem", "d", "loss_g", "loss_d",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_constant: usize,
    pub epochs_decay: usize,
    /// Stop once this many epochs have completed; defaults to the full schedule.
    pub epochs: Option<usize>,
    pub base_lr: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub crop: CropSpec,
    pub weights: LossWeights,
    /// Write a checkpoint every this many epochs (the last epoch always gets one).
    pub checkpoint_every: usize,
    pub cb_set: Vec<PathBuf>,
    pub plan_set: Vec<PathBuf>,
    pub mask_mode: MaskMode,
    pub out_dir: PathBuf,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_constant: 25,
            epochs_decay: 25,
            epochs: None,
            base_lr: 1e-4,
            adam: AdamConfig::default(),
            batch_size: 1,
            seed: 0,
            crop: CropSpec::default(),
            weights: LossWeights::default(),
            checkpoint_every: 5,
            cb_set: Vec::new(),
            plan_set: Vec::new(),
            mask_mode: MaskMode::PerSlice,
            out_dir: PathBuf::from("run"),
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
        }
    }
}

/// Expands keys such as `"weights.lambda_tv"` into nested objects.
pub fn unflatten(value: Value) -> Result<Value> {
    let Value::Object(map) = value else {
        return Ok(value);
    };
    let mut out = serde_json::Map::new();
    for (key, v) in map {
        let v = unflatten(v)?;
        let mut parts = key.split('.').peekable();
        let mut node = &mut out;
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                match (node.get_mut(part), v.clone()) {
                    (Some(Value::Object(existing)), Value::Object(incoming)) => existing.extend(incoming),
                    _ => {
                        node.insert(part.to_string(), v.clone());
                    }
                }
            } else {
                let entry = node.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
                node = entry
                    .as_object_mut()
                    .ok_or_else(|| Error::invalid("config", format!("key {key} nests inside a non-object")))?;
            }
        }
    }
    Ok(Value::Object(out))
}

/// Overlays `patch` on `base`, rejecting keys `base` does not have.
fn merge(base: &mut Value, patch: Value, prefix: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Error::invalid("config", format!("unknown key {key}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Writes `value` at a dotted `key` inside a nested JSON object.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::invalid("config", format!("key {key} nests inside a non-object")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::invalid("config", format!("key {key} nests inside a non-object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl TrainConfig {
    /// Parses a config from JSON text; nested objects and flat dotted keys
    /// are both accepted and missing fields take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let mut base = serde_json::to_value(TrainConfig::default()).expect("default config serializes");
        merge(&mut base, unflatten(value)?, "")?;
        serde_json::from_value(base).map_err(|e| Error::invalid("config", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_value(value)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.cb_set.iter_mut().chain(cfg.plan_set.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_constant + self.epochs_decay
    }

    /// Number of epochs this run stops after.
    pub fn stop_epoch(&self) -> usize {
        self.epochs.unwrap_or(self.total_epochs())
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs() == 0 {
            return Err(Error::invalid("epochs", "epochs_constant + epochs_decay must be positive"));
        }
        if let Some(e) = self.epochs {
            if e == 0 || e > self.total_epochs() {
                return Err(Error::invalid(
                    "epochs",
                    format!("{e} not in 1..={} (the schedule length)", self.total_epochs()),
                ));
            }
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::invalid("base_lr", format!("{} must be positive", self.base_lr)));
        }
        if self.batch_size != 1 {
            return Err(Error::invalid("batch_size", format!("{} unsupported; training runs one slice pair per step", self.batch_size)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint_every", "must be positive"));
        }
        self.crop.validate()?;
        let m = self.generator.size_multiple().max(self.discriminator.downsampling());
        if self.crop.height % m != 0 || self.crop.width % m != 0 {
            return Err(Error::invalid(
                "crop",
                format!("{}x{} is not divisible by {m}", self.crop.height, self.crop.width),
            ));
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        Ok(())
    }
}

/// Learning rate of `epoch`: constant, then linear decay reaching zero one
/// past the last epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_epochs();
    if epoch > total {
        return Err(Error::invalid("epoch", format!("{epoch} beyond the {total}-epoch schedule")));
    }
    if epoch < cfg.epochs_constant {
        return Ok(cfg.base_lr);
    }
    Ok(cfg.base_lr * ((total - epoch) as f64 / cfg.epochs_decay as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Suspect,
}

/// Flags a run whose cycle loss exceeds three times the reference.
pub fn failure_check(current_cycle_loss: f64, reference_cycle_loss: f64) -> Result<Verdict> {
    if !(reference_cycle_loss > 0.0) {
        return Err(Error::invalid("reference_cycle_loss", format!("{reference_cycle_loss} must be positive")));
    }
    Ok(if current_cycle_loss > 3.0 * reference_cycle_loss {
        Verdict::Suspect
    } else {
        Verdict::Ok
    })
}

/// Networks, optimizer states and counters of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// CBCT to planning CT.
    pub g_cp: Generator,
    /// Planning CT to CBCT.
    pub g_pc: Generator,
    pub d_p: Discriminator,
    pub d_c: Discriminator,
    pub opt_g_cp: Adam,
    pub opt_g_pc: Adam,
    pub opt_d_p: Adam,
    pub opt_d_c: Adam,
    pub weights: LossWeights,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub iteration: u64,
    pub epoch_cycle_sum: f64,
    pub epoch_cycle_count: u64,
    /// Mean cycle loss (CBCT side) of every completed epoch.
    pub epoch_cycle_means: Vec<f64>,
    pub reference_cycle_loss: Option<f64>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let g_cp = Generator::new(cfg.generator.clone(), &mut rng)?;
        let g_pc = Generator::new(cfg.generator.clone(), &mut rng)?;
        let d_p = Discriminator::new(cfg.discriminator.clone(), &mut rng)?;
        let d_c = Discriminator::new(cfg.discriminator.clone(), &mut rng)?;
        Ok(Self::from_networks(g_cp, g_pc, d_p, d_c, cfg.adam, cfg.weights, cfg.seed))
    }

    pub fn from_networks(
        g_cp: Generator,
        g_pc: Generator,
        d_p: Discriminator,
        d_c: Discriminator,
        adam: AdamConfig,
        weights: LossWeights,
        seed: u64,
    ) -> Self {
        TrainState {
            opt_g_cp: Adam::new(adam, g_cp.convs()),
            opt_g_pc: Adam::new(adam, g_pc.convs()),
            opt_d_p: Adam::new(adam, d_p.convs()),
            opt_d_c: Adam::new(adam, d_c.convs()),
            g_cp,
            g_pc,
            d_p,
            d_c,
            weights,
            seed,
            epoch: 0,
            iteration: 0,
            epoch_cycle_sum: 0.0,
            epoch_cycle_count: 0,
            epoch_cycle_means: Vec::new(),
            reference_cycle_loss: None,
        }
    }

    /// Optimizer updates applied to `[G_CP, G_PC, D_P, D_C]`.
    pub fn update_counts(&self) -> [u64; 4] {
        [self.opt_g_cp.steps, self.opt_g_pc.steps, self.opt_d_p.steps, self.opt_d_c.steps]
    }

    fn finish_epoch(&mut self) {
        let mean = self.epoch_cycle_sum / self.epoch_cycle_count.max(1) as f64;
        self.epoch_cycle_means.push(mean);
        self.reference_cycle_loss = Some(mean);
        self.epoch_cycle_sum = 0.0;
        self.epoch_cycle_count = 0;
        self.epoch += 1;
    }
}

fn tensor(a: ArrayView2<f32>) -> Tensor {
    a.to_owned().insert_axis(Axis(0))
}

fn plane(t: &Tensor) -> ArrayView2<'_, f32> {
    t.index_axis(Axis(0), 0)
}

fn non_finite(iteration: u64, what: String) -> Error {
    Error::NonFinite { iteration, breakdown: what }
}

/// Generator objective for one pair given the translations `G_CP(x)` and
/// `G_PC(y)`; fills both generators' gradient buffers without updating.
fn generator_pass<R: Rng + ?Sized>(
    state: &mut TrainState,
    xt: &Tensor,
    yt: &Tensor,
    (gx, t_gx): (&Tensor, &GeneratorTrace),
    (fy, t_fy): (&Tensor, &GeneratorTrace),
    loss_d: f64,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let w = state.weights;
    let iteration = state.iteration;
    state.g_cp.grads.zero();
    state.g_pc.grads.zero();
    let (fgx, t_fgx) = state.g_pc.forward_train(gx, rng)?;
    let (gfy, t_gfy) = state.g_cp.forward_train(fy, rng)?;
    let (ggx, t_ggx) = state.g_cp.forward_train(gx, rng)?;
    let (ffy, t_ffy) = state.g_pc.forward_train(fy, rng)?;
    let (dp_gx, t_dp_gx) = state.d_p.forward_train(gx)?;
    let (dc_fy, t_dc_fy) = state.d_c.forward_train(fy)?;

    let (x2, y2) = (plane(xt), plane(yt));
    let (gx2, fy2) = (plane(gx), plane(fy));
    let c = w.air_threshold_scaled as f32;
    let (cycle_a, cycle_b) = loss_cycle(x2, plane(&fgx), y2, plane(&gfy))?;
    let terms = GeneratorTerms {
        cycle_a: cycle_a as f64,
        cycle_b: cycle_b as f64,
        adv: loss_adversarial_g(plane(&dp_gx), plane(&dc_fy)) as f64,
        tv: loss_tv(gx2)? as f64,
        air: loss_air(x2, gx2, y2, fy2, c)? as f64,
        grad: loss_grad(x2, gx2, y2, fy2)? as f64,
        idem: loss_idem(gx2, plane(&ggx), fy2, plane(&ffy))? as f64,
    };
    let breakdown = compose_generator_loss(&terms, loss_d, &w).map_err(|e| match e {
        Error::NonFinite { breakdown, .. } => non_finite(iteration, breakdown),
        other => other,
    })?;

    let (lc, li) = (w.lambda_cycle as f32, w.lambda_idem as f32);
    let (d_fgx, d_gfy) = loss_cycle_grad(x2, plane(&fgx), y2, plane(&gfy))?;
    let (d_adv_p, d_adv_c) = loss_adversarial_g_grad(plane(&dp_gx), plane(&dc_fy));
    let d_tv = loss_tv_grad(gx2)?;
    let (_, d_air_gx, _, d_air_fy) = loss_air_grad(x2, gx2, y2, fy2, c)?;
    let (d_grad_gx, d_grad_fy) = loss_grad_grad(x2, gx2, y2, fy2)?;
    let (d_idem_gx, d_idem_ggx, d_idem_fy, d_idem_ffy) = loss_idem_grad(gx2, plane(&ggx), fy2, plane(&ffy))?;

    let mut grad_gx = d_tv.mapv(|v| v * w.lambda_tv as f32);
    let mut grad_fy = Array2::<f32>::zeros(fy2.raw_dim());
    grad_gx.scaled_add(w.lambda_air as f32, &d_air_gx);
    grad_fy.scaled_add(w.lambda_air as f32, &d_air_fy);
    grad_gx.scaled_add(w.lambda_grad as f32, &d_grad_gx);
    grad_fy.scaled_add(w.lambda_grad as f32, &d_grad_fy);
    if lc != 0.0 {
        let back = state.g_pc.backward(&t_fgx, &d_fgx.mapv(|v| v * lc).insert_axis(Axis(0)));
        grad_gx += &plane(&back);
        let back = state.g_cp.backward(&t_gfy, &d_gfy.mapv(|v| v * lc).insert_axis(Axis(0)));
        grad_fy += &plane(&back);
    }
    if li != 0.0 {
        let back = state.g_cp.backward(&t_ggx, &d_idem_ggx.mapv(|v| v * li).insert_axis(Axis(0)));
        grad_gx += &plane(&back);
        grad_gx.scaled_add(li, &d_idem_gx);
        let back = state.g_pc.backward(&t_ffy, &d_idem_ffy.mapv(|v| v * li).insert_axis(Axis(0)));
        grad_fy += &plane(&back);
        grad_fy.scaled_add(li, &d_idem_fy);
    }
    let la = w.lambda_adv as f32;
    if la != 0.0 {
        let back = state.d_p.backward(&t_dp_gx, &d_adv_p.insert_axis(Axis(0)), false);
        grad_gx.scaled_add(la, &plane(&back));
        let back = state.d_c.backward(&t_dc_fy, &d_adv_c.insert_axis(Axis(0)), false);
        grad_fy.scaled_add(la, &plane(&back));
    }
    state.g_cp.backward(t_gx, &grad_gx.insert_axis(Axis(0)));
    state.g_pc.backward(t_fy, &grad_fy.insert_axis(Axis(0)));
    Ok(breakdown)
}

/// One discriminator update followed by one generator update.
///
/// `x` is a scaled CBCT crop and `y` a scaled planning-CT crop; `rng`
/// drives the latent noise.
pub fn train_step<R: Rng + ?Sized>(state: &mut TrainState, x: ArrayView2<f32>, y: ArrayView2<f32>, lr: f32, rng: &mut R) -> Result<LossBreakdown> {
    let w = state.weights;
    let iteration = state.iteration;
    let xt = tensor(x);
    let yt = tensor(y);

    let (gx, t_gx) = state.g_cp.forward_train(&xt, rng)?;
    let (fy, t_fy) = state.g_pc.forward_train(&yt, rng)?;

    state.d_p.grads.zero();
    state.d_c.grads.zero();
    let (dp_fake, t_dp_fake) = state.d_p.forward_train(&gx)?;
    let (dp_real, t_dp_real) = state.d_p.forward_train(&yt)?;
    let (dc_fake, t_dc_fake) = state.d_c.forward_train(&fy)?;
    let (dc_real, t_dc_real) = state.d_c.forward_train(&xt)?;
    let maps = [plane(&dp_fake), plane(&dc_real), plane(&dc_fake), plane(&dp_real)];
    let loss_d = loss_discriminator(maps[0], maps[1], maps[2], maps[3], &w)? as f64;
    if !loss_d.is_finite() {
        return Err(non_finite(iteration, format!("discriminator loss {loss_d}")));
    }
    let [g_dp_fake, g_dc_real, g_dc_fake, g_dp_real] = loss_discriminator_grad(maps[0], maps[1], maps[2], maps[3], &w)?;
    state.d_p.backward(&t_dp_fake, &g_dp_fake.insert_axis(Axis(0)), true);
    state.d_p.backward(&t_dp_real, &g_dp_real.insert_axis(Axis(0)), true);
    state.d_c.backward(&t_dc_fake, &g_dc_fake.insert_axis(Axis(0)), true);
    state.d_c.backward(&t_dc_real, &g_dc_real.insert_axis(Axis(0)), true);
    state.d_p.apply_update(&mut state.opt_d_p, lr);
    state.d_c.apply_update(&mut state.opt_d_c, lr);

    let breakdown = generator_pass(state, &xt, &yt, (&gx, &t_gx), (&fy, &t_fy), loss_d, rng)?;
    state.g_cp.apply_update(&mut state.opt_g_cp, lr);
    state.g_pc.apply_update(&mut state.opt_g_pc, lr);

    state.iteration += 1;
    state.epoch_cycle_sum += breakdown.cycle_a;
    state.epoch_cycle_count += 1;
    Ok(breakdown)
}

/// Scaled, body-masked slices of the two unpaired training sets.
#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub cb: Vec<Array2<f32>>,
    pub plan: Vec<Array2<f32>>,
}

impl TrainingSet {
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let read = |paths: &[PathBuf]| -> Result<Vec<Array2<f32>>> {
            let mut out = Vec::new();
            for p in paths {
                out.extend(masked_scaled_slices(&load_volume(p)?, cfg.mask_mode)?);
            }
            Ok(out)
        };
        Ok(TrainingSet {
            cb: read(&cfg.cb_set)?,
            plan: read(&cfg.plan_set)?,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cb.len().min(self.plan.len())
    }
}

fn stream_rng(seed: u64, tag: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    rng.set_stream(stream);
    rng
}

const SHUFFLE_TAG: u64 = 0x5348_5546_464c_4500;
const STEP_TAG: u64 = 0x5354_4550_0000_0000;

/// Independent shuffles of both sets for `epoch`, paired by position.
pub fn epoch_pairs(seed: u64, epoch: usize, n_cb: usize, n_plan: usize) -> Vec<(usize, usize)> {
    let mut rng = stream_rng(seed, SHUFFLE_TAG, epoch as u64);
    let mut cb: Vec<usize> = (0..n_cb).collect();
    let mut plan: Vec<usize> = (0..n_plan).collect();
    cb.shuffle(&mut rng);
    plan.shuffle(&mut rng);
    cb.into_iter().zip(plan).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("checkpoint_epoch{epoch:03}.ckpt"))
}

/// Keeps the header and the first `iterations` rows of an existing log.
fn truncate_log(path: &Path, iterations: u64) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .take(iterations as usize + 1)
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs epochs `state.epoch .. cfg.stop_epoch()` over `data`.
///
/// Pass a state restored from a checkpoint to resume; the log in
/// `cfg.out_dir` is then cut back to the checkpoint's iteration and extended.
pub fn run_training(cfg: &TrainConfig, data: &TrainingSet, resume: Option<TrainState>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let steps = data.steps_per_epoch();
    if steps == 0 {
        return Err(Error::invalid(
            "dataset",
            format!("both sets must be non-empty (CB {}, Plan {})", data.cb.len(), data.plan.len()),
        ));
    }
    let resuming = resume.is_some();
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(cfg)?,
    };
    state.weights = cfg.weights;
    let out_dir = &cfg.out_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_NAME);
    if resuming && log_path.exists() {
        truncate_log(&log_path, state.iteration)?;
    } else {
        let mut w = csv::Writer::from_path(&log_path)?;
        w.write_record(LOG_COLUMNS)?;
        w.flush().map_err(|e| Error::io(&log_path, e))?;
    }
    let file = OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = csv::WriterBuilder::new().has_headers(false).from_writer(file);

    let stop = cfg.stop_epoch();
    let mut last_checkpoint = None;
    while state.epoch < stop {
        let epoch = state.epoch;
        let lr = lr_schedule(epoch, cfg)?;
        for (x_i, y_i) in epoch_pairs(cfg.seed, epoch, data.cb.len(), data.plan.len()) {
            let mut rng = stream_rng(cfg.seed, STEP_TAG, state.iteration);
            let x = center_crop(data.cb[x_i].view(), &cfg.crop, rng.next_u64())?;
            let y = center_crop(data.plan[y_i].view(), &cfg.crop, rng.next_u64())?;
            let b = train_step(&mut state, x.view(), y.view(), lr as f32, &mut rng)?;
            log.write_record(&[
                state.iteration.to_string(),
                epoch.to_string(),
                format!("{lr:e}"),
                b.cycle_a.to_string(),
                b.cycle_b.to_string(),
                b.adv.to_string(),
                b.tv.to_string(),
                b.air.to_string(),
                b.grad.to_string(),
                b.idem.to_string(),
                b.d.to_string(),
                b.loss_g.to_string(),
                b.loss_d.to_string(),
            ])?;
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        state.finish_epoch();
        log::info!(
            "epoch {}/{stop}: lr {lr:.2e}, mean cycle loss {:.5}",
            state.epoch,
            state.reference_cycle_loss.unwrap_or(f64::NAN)
        );
        if state.epoch % cfg.checkpoint_every == 0 || state.epoch == stop {
            let path = checkpoint_path(out_dir, state.epoch);
            save_checkpoint(&state, &path)?;
            last_checkpoint = Some(path);
        }
    }
    let checkpoint = match last_checkpoint {
        Some(p) => p,
        None => {
            let path = checkpoint_path(out_dir, state.epoch);
            save_checkpoint(&state, &path)?;
            path
        }
    };
    let mut latest = fs::File::create(out_dir.join("latest")).map_err(|e| Error::io(out_dir, e))?;
    writeln!(latest, "{}", checkpoint.file_name().expect("file name").to_string_lossy()).map_err(|e| Error::io(out_dir, e))?;
    Ok(TrainOutcome {
        state,
        checkpoint,
        log: log_path,
    })
}

/// Reads the per-iteration training log.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    message: format!("bad log value {f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}
