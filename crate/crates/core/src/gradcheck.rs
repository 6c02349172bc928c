//! Finite-difference check of every training loss against the tape's
//! gradients, on small networks.
//!
//! Each trial draws fresh networks and inputs, records the loss with the
//! network under test trainable, and compares every parameter's
//! derivative with a central difference. Trials closer than
//! `kink_threshold` to a relu or clamp kink, or whose hardest-example
//! mining changes under a perturbation, are redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{DcaError, Result};
use crate::losses::{
    cmd_loss, discriminator_loss, generator_loss, iaml_loss, mine_hardest, sep_loss, transform_loss, GanForm,
    TransformLossConfig,
};
use crate::networks::{Activation, MlpSpec, Mode, Network, NormConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub max_attempts: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub kink_threshold: f64,
    /// Width of inputs and embeddings.
    pub dim: usize,
    pub classes: usize,
    pub per_class: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            trials: 20,
            max_attempts: 2000,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            kink_threshold: 1e-3,
            dim: 6,
            classes: 3,
            per_class: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub loss: &'static str,
    pub trials: usize,
    pub rejected: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// A recorded loss: the root, the parameter leaves of the network under
/// test (in [`Network::trainable`] order) and optionally the embedding
/// whose mining must stay fixed.
pub struct Recorded {
    pub root: Var,
    pub params: Vec<Var>,
    pub mined: Option<Var>,
}

/// Records a loss given the networks; `nets[0]` is the one under test and
/// is trainable only when the flag is set.
pub type LossBuilder<'a> = dyn Fn(&mut Tape, &[Network], bool) -> Result<Recorded> + 'a;

fn mining_key(tape: &Tape, mined: Option<Var>, labels: &[usize]) -> Result<Option<(Vec<usize>, Vec<usize>)>> {
    mined
        .map(|v| mine_hardest(tape.value(v), labels).map(|m| (m.positive, m.negative)))
        .transpose()
}

/// Max-normalized discrepancy between tape and central-difference
/// gradients, or `None` when the point is too close to a kink.
pub fn fd_relative_error(
    nets: &[Network],
    labels: &[usize],
    build: &LossBuilder<'_>,
    cfg: &GradcheckConfig,
) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let rec = build(&mut tape, nets, true)?;
    if tape.kink_distance() < cfg.kink_threshold {
        return Ok(None);
    }
    let base_key = mining_key(&tape, rec.mined, labels)?;
    tape.backward(rec.root)?;
    let analytic: Vec<f64> = rec
        .params
        .iter()
        .flat_map(|&p| tape.grad(p).expect("param grad").data().to_vec())
        .collect();

    let eval = |perturbed: &[Network]| -> Result<Option<f64>> {
        let mut t = Tape::new();
        let r = build(&mut t, perturbed, false)?;
        if mining_key(&t, r.mined, labels)? != base_key {
            return Ok(None);
        }
        Ok(Some(t.value(r.root).item()))
    };

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = nets.to_vec();
    let n_tensors = nets[0].trainable().len();
    for ti in 0..n_tensors {
        let len = nets[0].trainable()[ti].len();
        for j in 0..len {
            let original = nets[0].trainable()[ti].data()[j];
            let set = |v: f64, work: &mut Vec<Network>| {
                work[0].trainable_mut("gc")[ti].1.data_mut()[j] = v;
            };
            set(original + cfg.step, &mut work);
            let plus = eval(&work)?;
            set(original - cfg.step, &mut work);
            let minus = eval(&work)?;
            set(original, &mut work);
            match (plus, minus) {
                (Some(p), Some(m)) => numeric.push((p - m) / (2.0 * cfg.step)),
                _ => return Ok(None),
            }
        }
    }
    let scale = numeric.iter().chain(&analytic).fold(0.0f64, |m, x| m.max(x.abs())).max(1e-8);
    let worst = numeric.iter().zip(&analytic).map(|(n, a)| (n - a).abs()).fold(0.0, f64::max);
    Ok(Some(worst / scale))
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, range: f64) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-range..range)).collect()).expect("shape")
}

fn perturb_biases(net: &mut Network, rng: &mut ChaCha8Rng) {
    for layer in &mut net.params.layers {
        for b in layer.bias.data_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
        if let Some(bn) = &mut layer.bn {
            for g in bn.gamma.data_mut() {
                *g = rng.random_range(0.5..1.5);
            }
            for b in bn.beta.data_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
        }
    }
}

/// Small stand-ins for the real networks.
struct Fixture {
    encoder: Network,
    transform: Network,
    discriminator: Network,
    x: Tensor,
    z1: Tensor,
    z2: Tensor,
    labels: Vec<usize>,
}

impl Fixture {
    fn draw(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Result<Self> {
        let d = cfg.dim;
        let n = cfg.classes * cfg.per_class;
        let mut net = |sizes: Vec<usize>, out: Activation, bn: Vec<bool>| -> Result<Network> {
            let mut net = Network::init(MlpSpec::new(sizes, out, bn)?, rng);
            perturb_biases(&mut net, rng);
            Ok(net)
        };
        let encoder = net(vec![d, d + 2, d], Activation::Tanh, vec![true, false])?;
        let transform = net(vec![d, d - 2, d], Activation::Tanh, vec![false, false])?;
        let discriminator = net(vec![d, 3, 1], Activation::Sigmoid, vec![false, false])?;
        let labels = (0..cfg.classes).flat_map(|c| std::iter::repeat_n(c, cfg.per_class)).collect();
        Ok(Fixture {
            encoder,
            transform,
            discriminator,
            x: random_rows(rng, n, d, 1.5),
            z1: random_rows(rng, n, d, 0.9),
            z2: random_rows(rng, n, d, 0.9),
            labels,
        })
    }
}

const NORM: NormConfig = NormConfig { eps: 1e-5, momentum: 0.9 };
const MARGIN: f64 = 1.0;
const EPS_LOG: f64 = 1e-7;

type CaseFn = fn(&Fixture) -> (Vec<Network>, Box<LossBuilder<'static>>);

fn case_iaml(f: &Fixture) -> (Vec<Network>, Box<LossBuilder<'static>>) {
    let (x, labels) = (f.x.clone(), f.labels.clone());
    let build = move |tape: &mut Tape, nets: &[Network], train: bool| {
        let input = tape.constant(x.clone());
        let fwd = nets[0].forward_tape(tape, input, Mode::Train, NORM, train)?;
        let root = iaml_loss(tape, fwd.output, &labels, MARGIN)?;
        Ok(Recorded {
            root,
            params: fwd.params,
            mined: Some(fwd.output),
        })
    };
    (vec![f.encoder.clone()], Box::new(build))
}

fn case_discriminator(f: &Fixture) -> (Vec<Network>, Box<LossBuilder<'static>>) {
    // real rows first, then fake rows, through a single pass
    let n = f.z2.rows();
    let mut stacked = f.z2.data().to_vec();
    stacked.extend_from_slice(f.z1.data());
    let stacked = Tensor::new(vec![2 * n, f.z1.cols()], stacked).expect("shape");
    let build = move |tape: &mut Tape, nets: &[Network], train: bool| {
        let input = tape.constant(stacked.clone());
        let fwd = nets[0].forward_tape(tape, input, Mode::Train, NORM, train)?;
        let real = tape.gather_rows(fwd.output, &(0..n).collect::<Vec<_>>())?;
        let fake = tape.gather_rows(fwd.output, &(n..2 * n).collect::<Vec<_>>())?;
        let root = discriminator_loss(tape, real, fake, EPS_LOG)?;
        Ok(Recorded {
            root,
            params: fwd.params,
            mined: None,
        })
    };
    (vec![f.discriminator.clone()], Box::new(build))
}

/// Transform-network cases: `which` selects the loss on `Zᵗ`.
fn transform_case(f: &Fixture, which: &'static str) -> (Vec<Network>, Box<LossBuilder<'static>>) {
    let (z1, z2, labels) = (f.z1.clone(), f.z2.clone(), f.labels.clone());
    let build = move |tape: &mut Tape, nets: &[Network], train: bool| {
        let input = tape.constant(z1.clone());
        let z2v = tape.constant(z2.clone());
        let fwd = nets[0].forward_tape(tape, input, Mode::Train, NORM, train)?;
        let zt = fwd.output;
        let d_fake = nets[1].forward_tape(tape, zt, Mode::Eval, NORM, false)?.output;
        let (root, mined) = match which {
            "L_SeP" => (sep_loss(tape, zt, &labels, MARGIN)?, Some(zt)),
            "L_G" => (generator_loss(tape, d_fake, EPS_LOG, GanForm::Saturating), None),
            "L_CMD" => (cmd_loss(tape, zt, z2v, &labels, &labels)?, None),
            _ => {
                let cfg = TransformLossConfig::default();
                (transform_loss(tape, zt, z2v, &labels, &labels, d_fake, &cfg)?.0, Some(zt))
            }
        };
        Ok(Recorded {
            root,
            params: fwd.params,
            mined,
        })
    };
    (vec![f.transform.clone(), f.discriminator.clone()], Box::new(build))
}

fn cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("L1_iaml", case_iaml),
        ("L2_iaml", case_iaml),
        ("L_D", case_discriminator),
        ("L_SeP", |f| transform_case(f, "L_SeP")),
        ("L_G", |f| transform_case(f, "L_G")),
        ("L_CMD", |f| transform_case(f, "L_CMD")),
        ("L_T", |f| transform_case(f, "L_T")),
    ]
}

pub const LOSS_NAMES: [&str; 7] = ["L1_iaml", "L2_iaml", "L_D", "L_SeP", "L_G", "L_CMD", "L_T"];

/// Runs `cfg.trials` accepted trials for each loss.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<GradcheckResult>> {
    if cfg.dim < 3 || cfg.dim > 16 || cfg.classes < 2 || cfg.per_class < 2 {
        return Err(DcaError::Config(
            "gradcheck needs 3 <= dim <= 16, classes >= 2 and per_class >= 2".into(),
        ));
    }
    let mut out = Vec::new();
    for (ci, (name, case)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(ci as u64);
        let (mut accepted, mut rejected, mut worst) = (0, 0, 0.0f64);
        while accepted < cfg.trials && accepted + rejected < cfg.max_attempts {
            let fixture = Fixture::draw(&mut rng, cfg)?;
            let (nets, build) = case(&fixture);
            match fd_relative_error(&nets, &fixture.labels, &*build, cfg)? {
                Some(err) => {
                    accepted += 1;
                    worst = worst.max(err);
                }
                None => rejected += 1,
            }
        }
        out.push(GradcheckResult {
            loss: name,
            trials: accepted,
            rejected,
            max_rel_error: worst,
            passed: accepted >= cfg.trials && worst <= cfg.tolerance,
        });
    }
    Ok(out)
}
