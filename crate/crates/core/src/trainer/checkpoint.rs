//! Checkpoint container.
//!
//! Layout: the 8-byte magic `CTXLCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, the JSON header, then every parameter
//! and Adam moment as little-endian `f32` in network order
//! `[G_CP, G_PC, D_P, D_C]`. The header carries a CRC-32 of that payload.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::losses::LossWeights;
use crate::networks::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use crate::optim::{Adam, AdamConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTXLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    generator_cp: GeneratorSpec,
    generator_cp_identity: bool,
    generator_pc: GeneratorSpec,
    generator_pc_identity: bool,
    discriminator_p: DiscriminatorSpec,
    discriminator_c: DiscriminatorSpec,
    adam: AdamConfig,
    adam_steps: [u64; 4],
    weights: LossWeights,
    seed: u64,
    epoch: usize,
    iteration: u64,
    epoch_cycle_sum: f64,
    epoch_cycle_count: u64,
    epoch_cycle_means: Vec<f64>,
    reference_cycle_loss: Option<f64>,
    payload_floats: u64,
    payload_crc32: u32,
}

fn push_all<'a>(out: &mut Vec<u8>, values: impl Iterator<Item = &'a f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_params(out: &mut Vec<u8>, convs: &[&Conv2d]) {
    for c in convs {
        push_all(out, c.weight.iter());
        push_all(out, c.bias.iter());
    }
}

fn write_moments(out: &mut Vec<u8>, adam: &Adam) {
    for i in 0..adam.m_weights.len() {
        push_all(out, adam.m_weights[i].iter());
        push_all(out, adam.v_weights[i].iter());
        push_all(out, adam.m_biases[i].iter());
        push_all(out, adam.v_biases[i].iter());
    }
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut payload = Vec::new();
    write_params(&mut payload, &state.g_cp.convs());
    write_params(&mut payload, &state.g_pc.convs());
    write_params(&mut payload, &state.d_p.convs());
    write_params(&mut payload, &state.d_c.convs());
    for adam in [&state.opt_g_cp, &state.opt_g_pc, &state.opt_d_p, &state.opt_d_c] {
        write_moments(&mut payload, adam);
    }
    let header = Header {
        generator_cp: state.g_cp.spec().clone(),
        generator_cp_identity: state.g_cp.is_identity(),
        generator_pc: state.g_pc.spec().clone(),
        generator_pc_identity: state.g_pc.is_identity(),
        discriminator_p: state.d_p.spec().clone(),
        discriminator_c: state.d_c.spec().clone(),
        adam: state.opt_g_cp.config,
        adam_steps: state.update_counts(),
        weights: state.weights,
        seed: state.seed,
        epoch: state.epoch,
        iteration: state.iteration,
        epoch_cycle_sum: state.epoch_cycle_sum,
        epoch_cycle_count: state.epoch_cycle_count,
        epoch_cycle_means: state.epoch_cycle_means.clone(),
        reference_cycle_loss: state.reference_cycle_loss,
        payload_floats: (payload.len() / 4) as u64,
        payload_crc32: crc32fast::hash(&payload),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(20 + header.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Vec<f32> {
        let out = self.data[self.pos..self.pos + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        self.pos += 4 * n;
        out
    }

    fn matrix(&mut self, like: &Array2<f32>) -> Array2<f32> {
        Array2::from_shape_vec(like.raw_dim(), self.take(like.len())).expect("shape from template")
    }

    fn vector(&mut self, like: &Array1<f32>) -> Array1<f32> {
        Array1::from_vec(self.take(like.len()))
    }

    fn params(&mut self, convs: Vec<&mut Conv2d>) {
        for c in convs {
            c.weight = self.matrix(&c.weight);
            c.bias = self.vector(&c.bias);
        }
    }

    fn moments(&mut self, adam: &mut Adam) {
        for i in 0..adam.m_weights.len() {
            adam.m_weights[i] = self.matrix(&adam.m_weights[i]);
            adam.v_weights[i] = self.matrix(&adam.v_weights[i]);
            adam.m_biases[i] = self.vector(&adam.m_biases[i]);
            adam.v_biases[i] = self.vector(&adam.v_biases[i]);
        }
    }
}

fn generator(spec: GeneratorSpec, identity: bool) -> Result<Generator> {
    if identity {
        Ok(Generator::identity(spec))
    } else {
        Generator::new(spec, &mut ChaCha8Rng::seed_from_u64(0))
    }
}

fn float_count(convs: &[&Conv2d]) -> u64 {
    convs.iter().map(|c| c.parameter_count() as u64).sum()
}

/// Restores a full training state; errors name the file and the defect.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (missing CTXLCKPT magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let Some(header_bytes) = bytes.get(20..20usize.saturating_add(header_len)) else {
        return Err(bad(format!("truncated header ({header_len} bytes declared)")));
    };
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(format!("malformed header: {e}")))?;
    let payload = &bytes[20 + header_len..];
    if payload.len() as u64 != header.payload_floats * 4 {
        return Err(bad(format!(
            "payload holds {} bytes, header declares {} floats",
            payload.len(),
            header.payload_floats
        )));
    }
    if crc32fast::hash(payload) != header.payload_crc32 {
        return Err(bad("payload checksum mismatch".into()));
    }

    let g_cp = generator(header.generator_cp, header.generator_cp_identity).map_err(|e| bad(e.to_string()))?;
    let g_pc = generator(header.generator_pc, header.generator_pc_identity).map_err(|e| bad(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d_p = Discriminator::new(header.discriminator_p, &mut rng).map_err(|e| bad(e.to_string()))?;
    let d_c = Discriminator::new(header.discriminator_c, &mut rng).map_err(|e| bad(e.to_string()))?;
    let params = float_count(&g_cp.convs()) + float_count(&g_pc.convs()) + float_count(&d_p.convs()) + float_count(&d_c.convs());
    if header.payload_floats != 3 * params {
        return Err(bad(format!(
            "payload has {} floats but the stored specs need {}",
            header.payload_floats,
            3 * params
        )));
    }

    let mut state = TrainState::from_networks(g_cp, g_pc, d_p, d_c, header.adam, header.weights, header.seed);
    let mut r = Reader { data: payload, pos: 0 };
    r.params(state.g_cp.convs_mut());
    r.params(state.g_pc.convs_mut());
    r.params(state.d_p.convs_mut());
    r.params(state.d_c.convs_mut());
    r.moments(&mut state.opt_g_cp);
    r.moments(&mut state.opt_g_pc);
    r.moments(&mut state.opt_d_p);
    r.moments(&mut state.opt_d_c);
    let [a, b, c, d] = header.adam_steps;
    state.opt_g_cp.steps = a;
    state.opt_g_pc.steps = b;
    state.opt_d_p.steps = c;
    state.opt_d_c.steps = d;
    state.epoch = header.epoch;
    state.iteration = header.iteration;
    state.epoch_cycle_sum = header.epoch_cycle_sum;
    state.epoch_cycle_count = header.epoch_cycle_count;
    state.epoch_cycle_means = header.epoch_cycle_means;
    state.reference_cycle_loss = header.reference_cycle_loss;
    Ok(state)
}
