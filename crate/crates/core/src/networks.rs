//! Fully connected networks: the two metric encoders, the cross-modality
//! transform, the discriminator, and the frozen feature extractors that
//! stand in for the convolutional backbones.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, NormStats, Tape, Var};
use crate::error::{DcaError, Result};
use crate::tensor::{self, Tensor};

/// Width of every embedding the encoders produce.
pub const EMBEDDING_DIM: usize = 128;

/// Hidden widths of the metric networks.
pub const METRIC_HIDDEN: [usize; 3] = [1024, 512, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => if x < 0.0 { 0.0 } else { x },
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => crate::autodiff::sigmoid(x),
            Activation::Identity => x,
        }
    }

    fn on_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// Layer topology of a fully connected network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// One flag per affine layer.
    pub batch_norm: Vec<bool>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, output_activation: Activation, batch_norm: Vec<bool>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(DcaError::Contract(format!(
                "mlp needs at least two positive layer sizes, got {layer_sizes:?}"
            )));
        }
        if batch_norm.len() != layer_sizes.len() - 1 {
            return Err(DcaError::Contract(format!(
                "{} batch-norm flags for {} layers",
                batch_norm.len(),
                layer_sizes.len() - 1
            )));
        }
        Ok(MlpSpec {
            layer_sizes,
            hidden_activation: Activation::Relu,
            output_activation,
            batch_norm,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `fan_in × fan_out`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: Option<BatchNormParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
}

/// Whether batch norm uses batch statistics or running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Numeric settings shared by every batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConfig {
    pub eps: f64,
    /// Weight of the previous running value in the moving average.
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            eps: 1e-5,
            momentum: 0.9,
        }
    }
}

/// Output of a forward pass recorded on a tape.
#[derive(Debug)]
pub struct TapeForward {
    pub output: Var,
    /// Trainable parameters in [`Network::trainable`] order; empty when the
    /// network was frozen for this pass.
    pub params: Vec<Var>,
    /// Batch statistics per layer (train mode, batch-norm layers only).
    pub stats: Vec<Option<BatchStats>>,
}

/// A fully connected network: topology plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: MlpSpec,
    pub params: NetworkParams,
}

impl Network {
    /// Random initialization: fan-in (Kaiming) scaling for relu layers,
    /// Xavier-uniform for tanh/sigmoid/identity layers, zero biases,
    /// `γ = 1`, `β = 0`, running mean 0 and variance 1.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(spec.num_layers());
        for l in 0..spec.num_layers() {
            let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
            let n = fan_in * fan_out;
            let data: Vec<f64> = match spec.activation(l) {
                Activation::Relu => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    (0..n).map(|_| normal.sample(rng)).collect()
                }
                _ => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let uniform = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                    (0..n).map(|_| uniform.sample(rng)).collect()
                }
            };
            let bn = spec.batch_norm[l].then(|| BatchNormParams {
                gamma: Tensor::ones(&[fan_out]),
                beta: Tensor::zeros(&[fan_out]),
                running_mean: Tensor::zeros(&[fan_out]),
                running_var: Tensor::ones(&[fan_out]),
            });
            layers.push(LayerParams {
                weight: Tensor::new(vec![fan_in, fan_out], data).expect("shape"),
                bias: Tensor::zeros(&[fan_out]),
                bn,
            });
        }
        Network {
            spec,
            params: NetworkParams { layers },
        }
    }

    /// Checks every parameter shape against the topology and that all
    /// values are finite.
    pub fn validate(&self) -> Result<()> {
        let spec = &self.spec;
        if self.params.layers.len() != spec.num_layers() {
            return Err(DcaError::Contract(format!(
                "{} parameter layers for {} spec layers",
                self.params.layers.len(),
                spec.num_layers()
            )));
        }
        for (l, layer) in self.params.layers.iter().enumerate() {
            let (fi, fo) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
            if layer.weight.shape() != [fi, fo] {
                return Err(DcaError::shape("network weight", layer.weight.shape(), &[fi, fo]));
            }
            if layer.bias.shape() != [fo] {
                return Err(DcaError::shape("network bias", layer.bias.shape(), &[fo]));
            }
            match (&layer.bn, spec.batch_norm[l]) {
                (Some(bn), true) => {
                    for t in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                        if t.shape() != [fo] {
                            return Err(DcaError::shape("batch norm", t.shape(), &[fo]));
                        }
                    }
                }
                (None, false) => {}
                _ => {
                    return Err(DcaError::Contract(format!(
                        "layer {l}: batch-norm parameters disagree with spec"
                    )))
                }
            }
        }
        if !self.named_tensors("net").iter().all(|(_, t)| t.all_finite()) {
            return Err(DcaError::Contract("non-finite network parameter".into()));
        }
        Ok(())
    }

    /// Learnable tensors in a fixed order: per layer weight, bias, then
    /// γ and β when batch norm is present.
    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.params.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
            if let Some(bn) = &layer.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    /// Same order as [`Network::trainable`], with names prefixed by `prefix`.
    pub fn trainable_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.params.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{l}.weight"), &mut layer.weight));
            out.push((format!("{prefix}.{l}.bias"), &mut layer.bias));
            if let Some(bn) = &mut layer.bn {
                out.push((format!("{prefix}.{l}.bn_gamma"), &mut bn.gamma));
                out.push((format!("{prefix}.{l}.bn_beta"), &mut bn.beta));
            }
        }
        out
    }

    /// Every tensor including running statistics, for checkpointing.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.params.layers.iter().enumerate() {
            out.push((format!("{prefix}.{l}.weight"), &layer.weight));
            out.push((format!("{prefix}.{l}.bias"), &layer.bias));
            if let Some(bn) = &layer.bn {
                out.push((format!("{prefix}.{l}.bn_gamma"), &bn.gamma));
                out.push((format!("{prefix}.{l}.bn_beta"), &bn.beta));
                out.push((format!("{prefix}.{l}.bn_running_mean"), &bn.running_mean));
                out.push((format!("{prefix}.{l}.bn_running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.params.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{l}.weight"), &mut layer.weight));
            out.push((format!("{prefix}.{l}.bias"), &mut layer.bias));
            if let Some(bn) = &mut layer.bn {
                out.push((format!("{prefix}.{l}.bn_gamma"), &mut bn.gamma));
                out.push((format!("{prefix}.{l}.bn_beta"), &mut bn.beta));
                out.push((format!("{prefix}.{l}.bn_running_mean"), &mut bn.running_mean));
                out.push((format!("{prefix}.{l}.bn_running_var"), &mut bn.running_var));
            }
        }
        out
    }

    /// Records a forward pass. When `trainable` is false the weights enter
    /// the tape as constants and receive no gradient.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: Mode,
        norm: NormConfig,
        trainable: bool,
    ) -> Result<TapeForward> {
        let width = tape.value(input).cols();
        if tape.value(input).shape().len() != 2 || width != self.spec.input_dim() {
            return Err(DcaError::shape(
                "network input",
                tape.value(input).shape(),
                &[0, self.spec.input_dim()],
            ));
        }
        let leaf = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let mut h = input;
        for (l, layer) in self.params.layers.iter().enumerate() {
            let w = leaf(tape, &layer.weight);
            let b = leaf(tape, &layer.bias);
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if trainable {
                params.extend([w, b]);
            }
            let mut layer_stats = None;
            if let Some(bn) = &layer.bn {
                let g = leaf(tape, &bn.gamma);
                let beta = leaf(tape, &bn.beta);
                if trainable {
                    params.extend([g, beta]);
                }
                let source = match mode {
                    Mode::Train => NormStats::Batch,
                    Mode::Eval => NormStats::Running {
                        mean: bn.running_mean.data(),
                        var: bn.running_var.data(),
                    },
                };
                let (out, s) = tape.batch_norm(h, g, beta, source, norm.eps)?;
                h = out;
                layer_stats = s;
            }
            stats.push(layer_stats);
            h = self.spec.activation(l).on_tape(tape, h);
        }
        Ok(TapeForward {
            output: h,
            params,
            stats,
        })
    }

    /// Folds observed batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[Option<BatchStats>], norm: NormConfig) {
        let mom = norm.momentum;
        for (layer, s) in self.params.layers.iter_mut().zip(stats) {
            if let (Some(bn), Some(s)) = (&mut layer.bn, s) {
                for (r, m) in bn.running_mean.data_mut().iter_mut().zip(&s.mean) {
                    *r = mom * *r + (1.0 - mom) * m;
                }
                for (r, v) in bn.running_var.data_mut().iter_mut().zip(&s.var) {
                    *r = mom * *r + (1.0 - mom) * v;
                }
            }
        }
    }

    /// Eval-mode forward pass without a tape.
    pub fn infer(&self, input: &Tensor, norm: NormConfig) -> Result<Tensor> {
        if input.shape().len() != 2 || input.cols() != self.spec.input_dim() {
            return Err(DcaError::shape("network input", input.shape(), &[0, self.spec.input_dim()]));
        }
        let mut h = input.clone();
        for (l, layer) in self.params.layers.iter().enumerate() {
            h = tensor::matmul(&h, &layer.weight)?;
            let cols = h.cols();
            let act = self.spec.activation(l);
            let bias = layer.bias.data();
            let affine: Option<Vec<(f64, f64)>> = layer.bn.as_ref().map(|bn| {
                (0..cols)
                    .map(|j| {
                        let inv = 1.0 / (bn.running_var.data()[j] + norm.eps).sqrt();
                        (inv, bn.running_mean.data()[j])
                    })
                    .collect()
            });
            for r in 0..h.rows() {
                for (j, x) in h.row_mut(r).iter_mut().enumerate() {
                    let mut v = *x + bias[j];
                    if let (Some(aff), Some(bn)) = (&affine, &layer.bn) {
                        let (inv, mean) = aff[j];
                        v = bn.gamma.data()[j] * ((v - mean) * inv) + bn.beta.data()[j];
                    }
                    *x = act.apply(v);
                }
            }
        }
        Ok(h)
    }
}

/// Metric network `input_dim-1024-512-256-128`: relu and batch norm on the
/// hidden layers, tanh on the output.
pub fn build_metric_net(input_dim: usize, rng: &mut impl Rng) -> Result<Network> {
    build_metric_net_with(input_dim, &METRIC_HIDDEN, rng)
}

pub fn build_metric_net_with(input_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Network> {
    if input_dim == 0 {
        return Err(DcaError::Contract("metric net input_dim must be positive".into()));
    }
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(EMBEDDING_DIM);
    let mut bn = vec![true; sizes.len() - 1];
    *bn.last_mut().unwrap() = false;
    Ok(Network::init(MlpSpec::new(sizes, Activation::Tanh, bn)?, rng))
}

/// Transformation network `128-64-32-64-128`, relu then tanh output.
pub fn build_transform_net(rng: &mut impl Rng) -> Network {
    let spec = MlpSpec::new(vec![EMBEDDING_DIM, 64, 32, 64, EMBEDDING_DIM], Activation::Tanh, vec![false; 4])
        .expect("static topology");
    Network::init(spec, rng)
}

/// Discriminator `128-64-1` with a sigmoid output.
pub fn build_discriminator(rng: &mut impl Rng) -> Network {
    let spec = MlpSpec::new(vec![EMBEDDING_DIM, 64, 1], Activation::Sigmoid, vec![false; 2])
        .expect("static topology");
    Network::init(spec, rng)
}

/// How per-view features of one shape are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewPooling {
    #[default]
    Max,
    Mean,
}

/// Fuses an `N_v × d` matrix of view features into one `d`-vector.
pub fn aggregate_views(views: &Tensor, pooling: ViewPooling) -> Result<Vec<f64>> {
    if views.shape().len() != 2 || views.rows() == 0 {
        return Err(DcaError::Contract(format!(
            "view aggregation needs a nonempty N_v×d matrix, got {:?}",
            views.shape()
        )));
    }
    let mut out = views.row(0).to_vec();
    for r in 1..views.rows() {
        for (o, &v) in out.iter_mut().zip(views.row(r)) {
            match pooling {
                ViewPooling::Max => *o = o.max(v),
                ViewPooling::Mean => *o += v,
            }
        }
    }
    if pooling == ViewPooling::Mean {
        let n = views.rows() as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorMode {
    #[default]
    Passthrough,
    RandomProjection,
}

/// Frozen map from raw per-image features to metric-net inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub mode: ExtractorMode,
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    projection: Option<Tensor>,
}

impl FeatureExtractor {
    pub fn passthrough(dim: usize) -> Self {
        FeatureExtractor {
            mode: ExtractorMode::Passthrough,
            input_dim: dim,
            output_dim: dim,
            seed: 0,
            projection: None,
        }
    }

    /// Gaussian projection scaled by `1/√input_dim`, regenerated from `seed`.
    pub fn random_projection(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("valid std");
        let data = (0..input_dim * output_dim).map(|_| normal.sample(&mut rng)).collect();
        FeatureExtractor {
            mode: ExtractorMode::RandomProjection,
            input_dim,
            output_dim,
            seed,
            projection: Some(Tensor::new(vec![input_dim, output_dim], data).expect("shape")),
        }
    }

    pub fn new(mode: ExtractorMode, input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        match mode {
            ExtractorMode::Passthrough if input_dim != output_dim => Err(DcaError::Contract(format!(
                "passthrough extractor needs input_dim = output_dim, got {input_dim} and {output_dim}"
            ))),
            ExtractorMode::Passthrough => Ok(Self::passthrough(input_dim)),
            ExtractorMode::RandomProjection => Ok(Self::random_projection(input_dim, output_dim, seed)),
        }
    }

    /// Applies the extractor to every row of an `n × input_dim` matrix.
    pub fn apply(&self, rows: &Tensor) -> Result<Tensor> {
        if rows.shape().len() != 2 || rows.cols() != self.input_dim {
            return Err(DcaError::shape("feature extractor", rows.shape(), &[0, self.input_dim]));
        }
        match &self.projection {
            None => Ok(rows.clone()),
            Some(p) => tensor::matmul(rows, p),
        }
    }
}

/// The four learnable networks plus the two frozen extractors.
#[derive(Debug, Clone, PartialEq)]
pub struct DcaModel {
    pub sketch_extractor: FeatureExtractor,
    pub shape_extractor: FeatureExtractor,
    pub pooling: ViewPooling,
    pub norm: NormConfig,
    pub sketch_net: Network,
    pub shape_net: Network,
    pub transform_net: Network,
    pub discriminator: Network,
}

impl DcaModel {
    /// Sketch features: extractor then metric net, one row per sketch.
    pub fn extract_sketches(&self, raw: &Tensor) -> Result<Tensor> {
        self.sketch_extractor.apply(raw)
    }

    /// Per-view extraction followed by view pooling, one row per shape.
    pub fn extract_shapes(&self, shapes: &[&Tensor]) -> Result<Tensor> {
        let n_views = shapes.first().map_or(0, |s| s.rows());
        let mut rows = Vec::with_capacity(shapes.len());
        for (i, views) in shapes.iter().enumerate() {
            if views.rows() != n_views {
                return Err(DcaError::Contract(format!(
                    "shape {i} has {} views, expected {n_views}",
                    views.rows()
                )));
            }
            let extracted = self.shape_extractor.apply(views)?;
            rows.push(aggregate_views(&extracted, self.pooling)?);
        }
        Tensor::from_rows(&rows)
    }

    /// `Z¹` in eval mode for raw sketch rows.
    pub fn forward_sketch(&self, raw: &Tensor) -> Result<Tensor> {
        self.sketch_net.infer(&self.extract_sketches(raw)?, self.norm)
    }

    /// `Z²` in eval mode for a list of `N_v × d` view matrices.
    pub fn forward_shape(&self, shapes: &[&Tensor]) -> Result<Tensor> {
        self.shape_net.infer(&self.extract_shapes(shapes)?, self.norm)
    }

    /// `Zᵗ = f_trans(Z¹)`, rowwise.
    pub fn transform(&self, z1: &Tensor) -> Result<Tensor> {
        if z1.shape().len() != 2 || z1.cols() != EMBEDDING_DIM {
            return Err(DcaError::shape("transform", z1.shape(), &[0, EMBEDDING_DIM]));
        }
        self.transform_net.infer(z1, self.norm)
    }

    pub fn discriminate(&self, z: &Tensor) -> Result<Tensor> {
        self.discriminator.infer(z, self.norm)
    }
}
