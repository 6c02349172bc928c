//! Binary checkpoints of a [`TrainState`].
//!
//! Payload: config JSON, input width, step counter, RNG position, every
//! network tensor by name, the four Adam states and the loss history.
//! Networks are rebuilt from the stored config and then overwritten, so
//! topology and tensor shapes are checked on load.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{LossRecord, Optimizers, Phase, TrainState};
use crate::autodiff::AdamState;
use crate::config::RunConfig;
use crate::container::{Reader, Writer};
use crate::error::{DcaError, Result};
use crate::losses::LossReport;
use crate::networks::Network;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCA1";
const VERSION: u32 = 1;

const GROUPS: [&str; 4] = ["sketch", "shape", "discriminator", "transform"];

fn network<'a>(state: &'a TrainState, group: &str) -> &'a Network {
    match group {
        "sketch" => &state.model.sketch_net,
        "shape" => &state.model.shape_net,
        "discriminator" => &state.model.discriminator,
        _ => &state.model.transform_net,
    }
}

fn parts_mut<'a>(state: &'a mut TrainState, group: &str) -> (&'a mut Network, &'a mut AdamState) {
    let (m, o) = (&mut state.model, &mut state.optim);
    match group {
        "sketch" => (&mut m.sketch_net, &mut o.sketch),
        "shape" => (&mut m.shape_net, &mut o.shape),
        "discriminator" => (&mut m.discriminator, &mut o.discriminator),
        _ => (&mut m.transform_net, &mut o.transform),
    }
}

fn optimizer<'a>(o: &'a Optimizers, group: &str) -> &'a AdamState {
    match group {
        "sketch" => &o.sketch,
        "shape" => &o.shape,
        "discriminator" => &o.discriminator,
        _ => &o.transform,
    }
}

fn write_option(w: &mut Writer, v: Option<f64>) {
    match v {
        Some(x) => {
            w.u8(1);
            w.f64(x);
        }
        None => w.u8(0),
    }
}

fn read_option(r: &mut Reader<'_>) -> Result<Option<f64>> {
    match r.u8()? {
        0 => Ok(None),
        1 => Ok(Some(r.f64()?)),
        t => Err(DcaError::Integrity(format!("bad option tag {t}"))),
    }
}

/// Serializes a state into checkpoint bytes.
pub fn write_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC, VERSION);
    w.str(&state.config.to_json());
    w.u64(state.input_dim as u64);
    w.u64(state.step);
    w.bytes(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.u128(state.rng.get_word_pos());
    for group in GROUPS {
        let tensors = network(state, group).named_tensors(group);
        w.u32(tensors.len() as u32);
        for (name, t) in tensors {
            w.named(&name, t);
        }
        let adam = optimizer(&state.optim, group);
        w.f64(adam.learning_rate);
        w.u64(adam.step);
        w.u32(adam.m.len() as u32);
        for (m, v) in adam.m.iter().zip(&adam.v) {
            w.tensor(m);
            w.tensor(v);
        }
    }
    w.u64(state.history.len() as u64);
    for rec in &state.history {
        w.u8(rec.phase.code());
        w.u64(rec.step);
        w.f64(rec.lr);
        for (_, v) in rec.report.entries() {
            write_option(&mut w, v);
        }
    }
    w.finish()
}

/// Parses checkpoint bytes. Corruption, a foreign magic or version, and
/// tensors that do not fit the configured topology are rejected.
pub fn read_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, VERSION)?;
    let config = RunConfig::from_json(&r.str()?)?;
    let input_dim = r.u64()? as usize;
    let step = r.u64()?;
    let seed: [u8; 32] = r
        .bytes()?
        .try_into()
        .map_err(|_| DcaError::Integrity("RNG seed must be 32 bytes".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(r.u128()?);

    let mut state = TrainState::new(&config, input_dim)?;
    state.step = step;
    state.rng = rng;
    for group in GROUPS {
        let (net, adam) = parts_mut(&mut state, group);
        let count = r.u32()? as usize;
        let mut targets = net.named_tensors_mut(group);
        if count != targets.len() {
            return Err(DcaError::Integrity(format!(
                "{group}: {count} tensors stored, topology has {}",
                targets.len()
            )));
        }
        for (name, slot) in targets.iter_mut() {
            let t = r.named(name)?;
            if t.shape() != slot.shape() {
                return Err(DcaError::Integrity(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t;
        }
        adam.learning_rate = r.f64()?;
        adam.step = r.u64()?;
        let n = r.u32()? as usize;
        if n != adam.m.len() {
            return Err(DcaError::Integrity(format!("{group}: Adam state has {n} moments")));
        }
        for i in 0..n {
            let (m, v) = (r.tensor()?, r.tensor()?);
            if m.shape() != adam.m[i].shape() || v.shape() != adam.v[i].shape() {
                return Err(DcaError::Integrity(format!("{group}: Adam moment {i} has the wrong shape")));
            }
            adam.m[i] = m;
            adam.v[i] = v;
        }
    }
    let n = r.u64()? as usize;
    let mut history = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let code = r.u8()?;
        let phase = Phase::from_code(code).ok_or_else(|| DcaError::Integrity(format!("unknown phase {code}")))?;
        let step = r.u64()?;
        let lr = r.f64()?;
        let report = LossReport {
            iaml_sketch: read_option(&mut r)?,
            iaml_shape: read_option(&mut r)?,
            discriminator: read_option(&mut r)?,
            sep: read_option(&mut r)?,
            generator: read_option(&mut r)?,
            cmd: read_option(&mut r)?,
            transform: read_option(&mut r)?,
        };
        history.push(LossRecord { phase, step, lr, report });
    }
    state.history = history;
    r.finish()?;
    for group in GROUPS {
        network(&state, group).validate()?;
    }
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(state)).map_err(|e| DcaError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| DcaError::io(path, e))?;
    read_checkpoint(&bytes)
}
