//! Alternating training of the two encoders, the discriminator and the
//! transformation network.
//!
//! After pretraining, every step performs four sub-updates in order, each
//! on a freshly sampled episode and each touching only its own parameter
//! group:
//!
//! 1. sketch encoder on `L¹_IAML`
//! 2. shape encoder on `L²_IAML`
//! 3. discriminator on `L_D`
//! 4. transform network on `L_T`
//!
//! Encoders are frozen (eval-mode, constant inputs) during 3 and 4.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Tape};
use crate::batching::{EpisodeBatch, EpisodeSampler};
use crate::config::{ModelConfig, RunConfig, TrainConfig};
use crate::data::{Dataset, Modality, Split};
use crate::error::{DcaError, Result};
use crate::losses::{discriminator_loss, iaml_loss, transform_loss, LossReport};
use crate::networks::{
    build_discriminator, build_metric_net_with, build_transform_net, DcaModel, FeatureExtractor, Mode,
};
use crate::tensor::Tensor;

/// `lr_init` up to and including `decay_start_step`, then
/// `lr_init · decay_rate^(step − decay_start_step)`.
pub fn learning_rate(step: u64, cfg: &TrainConfig) -> f64 {
    if step <= cfg.decay_start_step {
        cfg.lr_init
    } else {
        let exponent = (step - cfg.decay_start_step).min(i32::MAX as u64) as i32;
        cfg.lr_init * cfg.decay_rate.powi(exponent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    PretrainSketch,
    PretrainShape,
    PretrainDiscriminator,
    PretrainTransform,
    Train,
}

impl Phase {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        use Phase::*;
        [PretrainSketch, PretrainShape, PretrainDiscriminator, PretrainTransform, Train]
            .get(c as usize)
            .copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub phase: Phase,
    /// Phase-local index for pretraining, the step counter `k` for training.
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
}

/// One Adam state per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub sketch: AdamState,
    pub shape: AdamState,
    pub discriminator: AdamState,
    pub transform: AdamState,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: RunConfig,
    pub input_dim: usize,
    pub step: u64,
    pub model: DcaModel,
    pub optim: Optimizers,
    pub rng: ChaCha8Rng,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    /// Freshly initialized networks for features of width `input_dim`.
    pub fn new(config: &RunConfig, input_dim: usize) -> Result<Self> {
        config.train.validate()?;
        config.model.validate()?;
        let model = build_model(&config.model, input_dim, config.train.seed)?;
        let adam = config.train.adam;
        let lr = config.train.lr_init;
        let optim = Optimizers {
            sketch: AdamState::new(adam, lr, model.sketch_net.trainable()),
            shape: AdamState::new(adam, lr, model.shape_net.trainable()),
            discriminator: AdamState::new(adam, lr, model.discriminator.trainable()),
            transform: AdamState::new(adam, lr, model.transform_net.trainable()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(1);
        Ok(TrainState {
            config: config.clone(),
            input_dim,
            step: 0,
            model,
            optim,
            rng,
            history: Vec::new(),
        })
    }

    /// Records of the main loop, in order.
    pub fn train_records(&self) -> impl Iterator<Item = &LossRecord> {
        self.history.iter().filter(|r| r.phase == Phase::Train)
    }
}

pub(crate) fn build_extractors(model: &ModelConfig, input_dim: usize) -> Result<(FeatureExtractor, FeatureExtractor)> {
    let out_dim = match model.extractor {
        crate::networks::ExtractorMode::Passthrough => input_dim,
        crate::networks::ExtractorMode::RandomProjection => model.extractor_dim,
    };
    Ok((
        FeatureExtractor::new(model.extractor, input_dim, out_dim, model.extractor_seed)?,
        FeatureExtractor::new(model.extractor, input_dim, out_dim, model.extractor_seed.wrapping_add(1))?,
    ))
}

/// Networks initialized from `seed`, in a fixed construction order.
pub fn build_model(model: &ModelConfig, input_dim: usize, seed: u64) -> Result<DcaModel> {
    let (sketch_extractor, shape_extractor) = build_extractors(model, input_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feat = sketch_extractor.output_dim;
    let sketch_net = build_metric_net_with(feat, &model.metric_hidden, &mut rng)?;
    let shape_net = build_metric_net_with(feat, &model.metric_hidden, &mut rng)?;
    let transform_net = build_transform_net(&mut rng);
    let discriminator = build_discriminator(&mut rng);
    Ok(DcaModel {
        sketch_extractor,
        shape_extractor,
        pooling: model.view_pooling,
        norm: model.norm(),
        sketch_net,
        shape_net,
        transform_net,
        discriminator,
    })
}

/// Extracted metric-net inputs for every sample, computed once because
/// the extractors are frozen.
#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Dataset index → row in `sketches` or `shapes`.
    row_of: Vec<usize>,
    pub sketches: Tensor,
    pub shapes: Tensor,
}

impl PreparedData {
    pub fn new(dataset: &Dataset, model: &DcaModel) -> Result<Self> {
        let mut row_of = vec![usize::MAX; dataset.samples.len()];
        let sketch_idx = dataset.indices(Modality::Sketch, None);
        let shape_idx = dataset.indices(Modality::Shape, None);
        for (r, &i) in sketch_idx.iter().enumerate() {
            row_of[i] = r;
        }
        for (r, &i) in shape_idx.iter().enumerate() {
            row_of[i] = r;
        }
        let sketches = model.extract_sketches(&dataset.sketch_matrix(&sketch_idx)?)?;
        let views: Vec<&Tensor> = shape_idx.iter().map(|&i| &dataset.samples[i].features).collect();
        let shapes = if views.is_empty() {
            Tensor::zeros(&[0, model.shape_extractor.output_dim])
        } else {
            model.extract_shapes(&views)?
        };
        Ok(PreparedData {
            row_of,
            sketches,
            shapes,
        })
    }

    pub fn sketch_rows(&self, items: &[usize]) -> Tensor {
        self.sketches.select_rows(&items.iter().map(|&i| self.row_of[i]).collect::<Vec<_>>())
    }

    pub fn shape_rows(&self, items: &[usize]) -> Tensor {
        self.shapes.select_rows(&items.iter().map(|&i| self.row_of[i]).collect::<Vec<_>>())
    }
}

/// Binds a dataset to the training procedure.
#[derive(Debug, Clone)]
pub struct Trainer {
    data: PreparedData,
    sampler: EpisodeSampler,
}

fn finite(value: f64, step: u64, loss: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(DcaError::NonFiniteLoss { step, loss })
    }
}

impl Trainer {
    /// Episodes are drawn from samples tagged `train`.
    pub fn new(dataset: &Dataset, state: &TrainState) -> Result<Self> {
        let cfg = &state.config.train;
        let sampler = EpisodeSampler::new(dataset, Some(Split::Train), cfg.classes_per_batch, cfg.samples_per_class)
            .map_err(|e| DcaError::Sampling(format!("training set too small for episodes: {e}")))?;
        if dataset.input_dim != state.input_dim {
            return Err(DcaError::Contract(format!(
                "dataset input_dim {} does not match model input_dim {}",
                dataset.input_dim, state.input_dim
            )));
        }
        Ok(Trainer {
            data: PreparedData::new(dataset, &state.model)?,
            sampler,
        })
    }

    pub fn data(&self) -> &PreparedData {
        &self.data
    }

    fn episode(&self, state: &mut TrainState) -> EpisodeBatch {
        self.sampler.sample(&mut state.rng)
    }

    fn update_encoder(&self, state: &mut TrainState, modality: Modality, lr: f64) -> Result<f64> {
        let ep = self.episode(state);
        let labels = ep.labels();
        let (input, net, optim, prefix, name) = match modality {
            Modality::Sketch => (
                self.data.sketch_rows(&ep.sketch_items),
                &mut state.model.sketch_net,
                &mut state.optim.sketch,
                "sketch",
                "L1_iaml",
            ),
            Modality::Shape => (
                self.data.shape_rows(&ep.shape_items),
                &mut state.model.shape_net,
                &mut state.optim.shape,
                "shape",
                "L2_iaml",
            ),
        };
        let norm = state.model.norm;
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let fwd = net.forward_tape(&mut tape, x, Mode::Train, norm, true)?;
        let loss = iaml_loss(&mut tape, fwd.output, &labels, state.config.train.loss.margin)?;
        let value = finite(tape.value(loss).item(), state.step, name)?;
        tape.backward(loss)?;
        let grads: Vec<&Tensor> = fwd.params.iter().map(|&v| tape.grad(v).expect("param grad")).collect();
        optim.learning_rate = lr;
        optim.step(&mut net.trainable_mut(prefix), &grads)?;
        net.update_running_stats(&fwd.stats, norm);
        Ok(value)
    }

    /// Sketch-encoder sub-update on `L¹_IAML`.
    pub fn update_sketch_encoder(&self, state: &mut TrainState, lr: f64) -> Result<f64> {
        self.update_encoder(state, Modality::Sketch, lr)
    }

    /// Shape-encoder sub-update on `L²_IAML`.
    pub fn update_shape_encoder(&self, state: &mut TrainState, lr: f64) -> Result<f64> {
        self.update_encoder(state, Modality::Shape, lr)
    }

    /// Frozen-encoder embeddings for one episode.
    fn frozen_embeddings(&self, state: &TrainState, ep: &EpisodeBatch) -> Result<(Tensor, Tensor)> {
        let m = &state.model;
        let z1 = m.sketch_net.infer(&self.data.sketch_rows(&ep.sketch_items), m.norm)?;
        let z2 = m.shape_net.infer(&self.data.shape_rows(&ep.shape_items), m.norm)?;
        Ok((z1, z2))
    }

    /// Discriminator sub-update on `L_D`. Transformed features enter as
    /// constants.
    pub fn update_discriminator(&self, state: &mut TrainState, lr: f64) -> Result<f64> {
        let ep = self.episode(state);
        let (z1, z2) = self.frozen_embeddings(state, &ep)?;
        let zt = state.model.transform(&z1)?;
        let n = z2.rows();
        let mut stacked = z2.into_data();
        stacked.extend_from_slice(zt.data());
        let stacked = Tensor::new(vec![2 * n, zt.cols()], stacked)?;

        let norm = state.model.norm;
        let mut tape = Tape::new();
        let x = tape.constant(stacked);
        let fwd = state.model.discriminator.forward_tape(&mut tape, x, Mode::Train, norm, true)?;
        let real_rows: Vec<usize> = (0..n).collect();
        let fake_rows: Vec<usize> = (n..2 * n).collect();
        let d_real = tape.gather_rows(fwd.output, &real_rows)?;
        let d_fake = tape.gather_rows(fwd.output, &fake_rows)?;
        let loss = discriminator_loss(&mut tape, d_real, d_fake, state.config.train.loss.eps_log)?;
        let value = finite(tape.value(loss).item(), state.step, "L_D")?;
        tape.backward(loss)?;
        let grads: Vec<&Tensor> = fwd.params.iter().map(|&v| tape.grad(v).expect("param grad")).collect();
        state.optim.discriminator.learning_rate = lr;
        state
            .optim
            .discriminator
            .step(&mut state.model.discriminator.trainable_mut("discriminator"), &grads)?;
        Ok(value)
    }

    /// Transform sub-update on `L_T`; the discriminator's weights are
    /// constants here.
    pub fn update_transform(&self, state: &mut TrainState, lr: f64) -> Result<LossReport> {
        let ep = self.episode(state);
        let labels = ep.labels();
        let (z1, z2) = self.frozen_embeddings(state, &ep)?;
        let norm = state.model.norm;
        let mut tape = Tape::new();
        let x = tape.constant(z1);
        let z2v = tape.constant(z2);
        let fwd = state.model.transform_net.forward_tape(&mut tape, x, Mode::Train, norm, true)?;
        let zt = fwd.output;
        let d_fake = state.model.discriminator.forward_tape(&mut tape, zt, Mode::Eval, norm, false)?.output;
        let (loss, report) = transform_loss(&mut tape, zt, z2v, &labels, &labels, d_fake, &state.config.train.loss)?;
        if let Some(name) = report.first_non_finite() {
            return Err(DcaError::NonFiniteLoss {
                step: state.step,
                loss: name,
            });
        }
        tape.backward(loss)?;
        let grads: Vec<&Tensor> = fwd.params.iter().map(|&v| tape.grad(v).expect("param grad")).collect();
        state.optim.transform.learning_rate = lr;
        state
            .optim
            .transform
            .step(&mut state.model.transform_net.trainable_mut("transform"), &grads)?;
        Ok(report)
    }

    fn adversarial_enabled(state: &TrainState) -> bool {
        !state.config.train.encoders_only
    }

    /// Pretraining: each encoder for `pretrain_steps` on its own IAML loss,
    /// then `pretrain_steps` alternating discriminator/transform updates
    /// with the encoders frozen. Runs at `lr_init`.
    pub fn pretrain(&self, state: &mut TrainState) -> Result<()> {
        let cfg = state.config.train.clone();
        let lr = cfg.lr_init;
        let record = |state: &mut TrainState, phase, step, report| {
            state.history.push(LossRecord { phase, step, lr, report });
        };
        for i in 0..cfg.pretrain_steps {
            let v = self.update_sketch_encoder(state, lr)?;
            let report = LossReport {
                iaml_sketch: Some(v),
                ..Default::default()
            };
            record(state, Phase::PretrainSketch, i + 1, report);
        }
        for i in 0..cfg.pretrain_steps {
            let v = self.update_shape_encoder(state, lr)?;
            let report = LossReport {
                iaml_shape: Some(v),
                ..Default::default()
            };
            record(state, Phase::PretrainShape, i + 1, report);
        }
        if Self::adversarial_enabled(state) {
            for i in 0..cfg.pretrain_steps {
                if cfg.loss.enable_gan {
                    let v = self.update_discriminator(state, lr)?;
                    let report = LossReport {
                        discriminator: Some(v),
                        ..Default::default()
                    };
                    record(state, Phase::PretrainDiscriminator, i + 1, report);
                }
                let report = self.update_transform(state, lr)?;
                record(state, Phase::PretrainTransform, i + 1, report);
            }
        }
        Ok(())
    }

    /// One outer iteration: the four sub-updates in order, then `k += 1`.
    pub fn train_step(&self, state: &mut TrainState) -> Result<LossReport> {
        let cfg = state.config.train.clone();
        if state.step >= cfg.iter_max {
            return Err(DcaError::Contract(format!(
                "step counter {} already reached iter_max {}",
                state.step, cfg.iter_max
            )));
        }
        let lr = learning_rate(state.step, &cfg);
        let mut report = LossReport {
            iaml_sketch: Some(self.update_sketch_encoder(state, lr)?),
            iaml_shape: Some(self.update_shape_encoder(state, lr)?),
            ..Default::default()
        };
        if Self::adversarial_enabled(state) {
            if cfg.loss.enable_gan {
                report.discriminator = Some(self.update_discriminator(state, lr)?);
            }
            report.merge(&self.update_transform(state, lr)?);
        }
        state.step += 1;
        state.history.push(LossRecord {
            phase: Phase::Train,
            step: state.step,
            lr,
            report,
        });
        Ok(report)
    }

    /// Trains until `iter_max`, pretraining first on a fresh state.
    /// `on_step` sees each completed step.
    pub fn run(&self, state: &mut TrainState, mut on_step: impl FnMut(&TrainState) -> Result<()>) -> Result<()> {
        if state.step == 0 && state.history.is_empty() {
            self.pretrain(state)?;
        }
        while state.step < state.config.train.iter_max {
            self.train_step(state)?;
            on_step(state)?;
        }
        Ok(())
    }
}

/// Initializes and pretrains on `dataset`.
pub fn pretrain(dataset: &Dataset, config: &RunConfig) -> Result<TrainState> {
    let mut state = TrainState::new(config, dataset.input_dim)?;
    Trainer::new(dataset, &state)?.pretrain(&mut state)?;
    Ok(state)
}

pub const LOSS_CSV_HEADER: &str = "step,L1_iaml,L2_iaml,L_D,L_SeP,L_G,L_CMD,L_T,lr";

/// One loss-log row. Values use the shortest round-trip decimal form;
/// losses a step did not evaluate are left empty.
pub fn loss_csv_row(record: &LossRecord) -> String {
    let mut row = record.step.to_string();
    for (_, v) in record.report.entries() {
        row.push(',');
        if let Some(v) = v {
            let _ = write!(row, "{v:?}");
        }
    }
    let _ = write!(row, ",{:?}", record.lr);
    row
}

#[cfg(test)]
mod tests;
