//! Training objectives.
//!
//! * importance-aware metric learning (batch-hard triplet hinge) for each
//!   encoder, reused on transformed sketch features as the
//!   semantics-preserving term;
//! * the generator and discriminator adversarial losses;
//! * the class-aware cross-modality mean discrepancy;
//! * the transform loss combining the three.
//!
//! Mining runs on forward values. The selected indices are constants for
//! differentiation, so the loss is piecewise smooth in the features.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DcaError, Result};
use crate::par::{self, Execution};
use crate::tensor::{l2_distance, Tensor};

/// Hardest positive and negative per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningResult {
    pub positive: Vec<usize>,
    pub positive_dist: Vec<f64>,
    pub negative: Vec<usize>,
    pub negative_dist: Vec<f64>,
}

impl MiningResult {
    /// Hinge argument `d(anchor, neg) − d(anchor, pos)` per anchor.
    pub fn margins(&self) -> Vec<f64> {
        self.negative_dist
            .iter()
            .zip(&self.positive_dist)
            .map(|(n, p)| n - p)
            .collect()
    }
}

fn check_mining_labels(labels: &[usize]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(DcaError::Mining(format!(
            "batch needs at least 2 distinct classes, found {}",
            counts.len()
        )));
    }
    if let Some((class, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(DcaError::Mining(format!("class {class} has a single sample in the batch")));
    }
    Ok(())
}

/// Batch-hard mining under the Euclidean metric. Ties resolve to the lowest
/// row index.
pub fn mine_hardest(z: &Tensor, labels: &[usize]) -> Result<MiningResult> {
    if z.shape().len() != 2 || z.rows() != labels.len() {
        return Err(DcaError::shape("mine_hardest", z.shape(), &[labels.len()]));
    }
    check_mining_labels(labels)?;
    let n = labels.len();
    let exec = Execution::for_work(n * n * z.cols());
    let per_anchor = par::map_range(exec, n, |a| {
        let mut pos = (usize::MAX, f64::NEG_INFINITY);
        let mut neg = (usize::MAX, f64::INFINITY);
        for b in 0..n {
            if b == a {
                continue;
            }
            let d = l2_distance(z.row(a), z.row(b));
            if labels[b] == labels[a] {
                if pos.0 == usize::MAX || d > pos.1 {
                    pos = (b, d);
                }
            } else if neg.0 == usize::MAX || d < neg.1 {
                neg = (b, d);
            }
        }
        (pos, neg)
    });
    let mut out = MiningResult {
        positive: Vec::with_capacity(n),
        positive_dist: Vec::with_capacity(n),
        negative: Vec::with_capacity(n),
        negative_dist: Vec::with_capacity(n),
    };
    for ((p, pd), (q, qd)) in per_anchor {
        out.positive.push(p);
        out.positive_dist.push(pd);
        out.negative.push(q);
        out.negative_dist.push(qd);
    }
    Ok(out)
}

/// IAML hinge with precomputed mining:
/// `Σ_anchors max(0, η − [d(a, neg) − d(a, pos)])`.
pub fn iaml_loss_with_mining(tape: &mut Tape, z: Var, mining: &MiningResult, margin: f64) -> Result<Var> {
    let neg = tape.gather_rows(z, &mining.negative)?;
    let pos = tape.gather_rows(z, &mining.positive)?;
    let d_neg = tape.row_distance(z, neg)?;
    let d_pos = tape.row_distance(z, pos)?;
    let gap = tape.sub(d_neg, d_pos)?;
    let neg_gap = tape.scale(gap, -1.0);
    let hinge_arg = tape.add_scalar(neg_gap, margin);
    let hinge = tape.relu(hinge_arg);
    Ok(tape.sum(hinge))
}

/// Importance-aware metric learning loss over one batch.
pub fn iaml_loss(tape: &mut Tape, z: Var, labels: &[usize], margin: f64) -> Result<Var> {
    if margin <= 0.0 {
        return Err(DcaError::Contract(format!("margin must be positive, got {margin}")));
    }
    let mining = mine_hardest(tape.value(z), labels)?;
    iaml_loss_with_mining(tape, z, &mining, margin)
}

/// Semantics-preserving term: the IAML loss on transformed sketch features.
pub fn sep_loss(tape: &mut Tape, z_t: Var, labels: &[usize], margin: f64) -> Result<Var> {
    iaml_loss(tape, z_t, labels, margin)
}

/// Generator objective form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanForm {
    /// `mean log(1 − D(zᵗ))`.
    #[default]
    Saturating,
    /// `−mean log D(zᵗ)`.
    NonSaturating,
}

fn clamp_probs(tape: &mut Tape, p: Var, eps_log: f64) -> Var {
    tape.clamp(p, eps_log, 1.0 - eps_log)
}

fn mean_log_one_minus(tape: &mut Tape, p: Var) -> Var {
    let neg = tape.scale(p, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let l = tape.log(one_minus);
    tape.mean(l)
}

/// Adversarial loss for the transform network, given discriminator
/// probabilities on transformed sketch features.
pub fn generator_loss(tape: &mut Tape, d_fake: Var, eps_log: f64, form: GanForm) -> Var {
    let p = clamp_probs(tape, d_fake, eps_log);
    match form {
        GanForm::Saturating => mean_log_one_minus(tape, p),
        GanForm::NonSaturating => {
            let l = tape.log(p);
            let m = tape.mean(l);
            tape.scale(m, -1.0)
        }
    }
}

/// `−mean log D(z²) − mean log(1 − D(zᵗ))`.
///
/// Callers feed `zᵗ` as a tape constant so only the discriminator's
/// parameters receive gradient.
pub fn discriminator_loss(tape: &mut Tape, d_real: Var, d_fake: Var, eps_log: f64) -> Result<Var> {
    let real = clamp_probs(tape, d_real, eps_log);
    let fake = clamp_probs(tape, d_fake, eps_log);
    let lr = tape.log(real);
    let mean_real = tape.mean(lr);
    let mean_fake = mean_log_one_minus(tape, fake);
    let total = tape.add(mean_real, mean_fake)?;
    Ok(tape.scale(total, -1.0))
}

/// Row groups per class, in order of first appearance in `labels`.
pub fn class_groups(labels: &[usize]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut classes: Vec<usize> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match classes.iter().position(|&c| c == l) {
            Some(g) => groups[g].push(i),
            None => {
                classes.push(l);
                groups.push(vec![i]);
            }
        }
    }
    (classes, groups)
}

/// Class-aware cross-modality mean discrepancy:
/// `Σ_y ‖mean(zᵗ | y) − mean(z² | y)‖₂` with batch means per class.
pub fn cmd_loss(tape: &mut Tape, z_t: Var, z2: Var, labels_t: &[usize], labels_2: &[usize]) -> Result<Var> {
    if tape.value(z_t).rows() != labels_t.len() || tape.value(z2).rows() != labels_2.len() {
        return Err(DcaError::Contract("cmd_loss: label count differs from row count".into()));
    }
    let (classes_t, groups_t) = class_groups(labels_t);
    let (classes_2, groups_2) = class_groups(labels_2);
    let mut sorted_t = classes_t.clone();
    let mut sorted_2 = classes_2.clone();
    sorted_t.sort_unstable();
    sorted_2.sort_unstable();
    if sorted_t != sorted_2 {
        return Err(DcaError::Contract(format!(
            "cmd_loss: class sets differ ({classes_t:?} vs {classes_2:?})"
        )));
    }
    let groups_2_aligned: Vec<Vec<usize>> = classes_t
        .iter()
        .map(|c| groups_2[classes_2.iter().position(|x| x == c).unwrap()].clone())
        .collect();
    let means_t = tape.group_means(z_t, &groups_t)?;
    let means_2 = tape.group_means(z2, &groups_2_aligned)?;
    let dists = tape.row_distance(means_t, means_2)?;
    Ok(tape.sum(dists))
}

/// Named scalar losses for one step. Entries are `None` when the step did
/// not evaluate that loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub iaml_sketch: Option<f64>,
    pub iaml_shape: Option<f64>,
    pub discriminator: Option<f64>,
    pub sep: Option<f64>,
    pub generator: Option<f64>,
    pub cmd: Option<f64>,
    pub transform: Option<f64>,
}

impl LossReport {
    /// `(name, value)` pairs in log-column order.
    pub fn entries(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("L1_iaml", self.iaml_sketch),
            ("L2_iaml", self.iaml_shape),
            ("L_D", self.discriminator),
            ("L_SeP", self.sep),
            ("L_G", self.generator),
            ("L_CMD", self.cmd),
            ("L_T", self.transform),
        ]
    }

    /// First non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.entries()
            .into_iter()
            .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    /// `L_T = L_SeP + (L_G + L_CMD)`, compared bit for bit. Vacuously true
    /// when the transform loss was not evaluated.
    pub fn transform_identity_holds(&self) -> bool {
        match (self.transform, self.sep, self.generator, self.cmd) {
            (Some(t), Some(s), Some(g), Some(c)) => t.to_bits() == (s + (g + c)).to_bits(),
            (None, ..) => true,
            _ => false,
        }
    }

    /// Copies every `Some` entry of `other` over this report.
    pub fn merge(&mut self, other: &LossReport) {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(iaml_sketch, iaml_shape, discriminator, sep, generator, cmd, transform);
    }
}

/// Which terms of the transform loss are active, and their weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformLossConfig {
    pub margin: f64,
    pub eps_log: f64,
    pub gan_form: GanForm,
    pub enable_sep: bool,
    pub enable_cmd: bool,
    pub enable_gan: bool,
    pub weight_sep: f64,
    pub weight_gan: f64,
    pub weight_cmd: f64,
}

impl Default for TransformLossConfig {
    fn default() -> Self {
        TransformLossConfig {
            margin: 1.0,
            eps_log: 1e-7,
            gan_form: GanForm::Saturating,
            enable_sep: true,
            enable_cmd: true,
            enable_gan: true,
            weight_sep: 1.0,
            weight_gan: 1.0,
            weight_cmd: 1.0,
        }
    }
}

/// `L_T = L_SeP + (L_G + L_CMD)`.
///
/// Disabled terms are left out of the graph and reported as `0.0`. The
/// report stores each component after weighting, so the identity in
/// [`LossReport::transform_identity_holds`] is exact.
pub fn transform_loss(
    tape: &mut Tape,
    z_t: Var,
    z2: Var,
    labels_t: &[usize],
    labels_2: &[usize],
    d_fake: Var,
    cfg: &TransformLossConfig,
) -> Result<(Var, LossReport)> {
    let zero = |tape: &mut Tape| tape.constant(Tensor::scalar(0.0));
    let weighted = |tape: &mut Tape, v: Var, w: f64| if w == 1.0 { v } else { tape.scale(v, w) };

    let sep = if cfg.enable_sep {
        let v = sep_loss(tape, z_t, labels_t, cfg.margin)?;
        weighted(tape, v, cfg.weight_sep)
    } else {
        zero(tape)
    };
    let gen = if cfg.enable_gan {
        let v = generator_loss(tape, d_fake, cfg.eps_log, cfg.gan_form);
        weighted(tape, v, cfg.weight_gan)
    } else {
        zero(tape)
    };
    let cmd = if cfg.enable_cmd {
        let v = cmd_loss(tape, z_t, z2, labels_t, labels_2)?;
        weighted(tape, v, cfg.weight_cmd)
    } else {
        zero(tape)
    };
    let adversarial = tape.add(gen, cmd)?;
    let total = tape.add(sep, adversarial)?;
    let report = LossReport {
        sep: Some(tape.value(sep).item()),
        generator: Some(tape.value(gen).item()),
        cmd: Some(tape.value(cmd).item()),
        transform: Some(tape.value(total).item()),
        ..LossReport::default()
    };
    Ok((total, report))
}
