//! Hierarchical multi-objective loss over a response pair.
//!
//! `total = λ_dim·L_dim + λ_rank·L_rank + λ_overall·L_overall`, where the
//! dimension term is a binary cross-entropy on relevance logits and the two
//! ranking terms share one pairwise loss: a margin hinge for strict
//! preferences and a squared gap for ties.
//!
//! Gradients are taken with respect to the head outputs. The aggregation
//! mask is a constant, and hinge/rectifier kinks use subgradient 0.

use serde::{Deserialize, Serialize};

use crate::error::{MdrError, Result};
use crate::head::{logistic, HeadOutputs};
use crate::verdict::Verdict;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda_dim: f64,
    pub lambda_rank: f64,
    pub lambda_overall: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            lambda_dim: 1.0,
            lambda_rank: 1.0,
            lambda_overall: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(MdrError::InvalidConfig(format!("margin must be > 0, got {}", self.margin)));
        }
        for (name, v) in [
            ("lambda_dim", self.lambda_dim),
            ("lambda_rank", self.lambda_rank),
            ("lambda_overall", self.lambda_overall),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(MdrError::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Labels in dense per-dimension form.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLabels {
    pub z: Vec<bool>,
    /// Per-dimension verdicts; only entries with `z[k]` are consulted.
    pub p: Vec<Verdict>,
    pub o: Verdict,
}

/// Inputs to [`total_loss`]: both responses share the instruction, hence
/// the relevance logits of `a` are used for the dimension term.
#[derive(Debug, Clone, Copy)]
pub struct PairLossInput<'a> {
    pub outputs_a: &'a HeadOutputs,
    pub outputs_b: &'a HeadOutputs,
    pub labels: &'a DenseLabels,
}

/// Component values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dim: f64,
    pub rank: f64,
    pub overall: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add_scaled(&mut self, other: &LossBreakdown, scale: f64) {
        self.dim += other.dim * scale;
        self.rank += other.rank * scale;
        self.overall += other.overall * scale;
        self.total += other.total * scale;
    }
}

/// Gradient of the total loss with respect to the head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGradients {
    pub relevance_logits: Vec<f64>,
    pub scores_a: Vec<f64>,
    pub scores_b: Vec<f64>,
    pub weight_logits_a: Vec<f64>,
    pub weight_logits_b: Vec<f64>,
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn dim_loss(logits: &[f64], z: &[bool]) -> Result<f64> {
    if logits.len() != z.len() {
        return Err(MdrError::shape("dim_loss", logits.len(), z.len()));
    }
    if logits.is_empty() {
        return Err(MdrError::EmptyInput("dim_loss logits"));
    }
    // -[z log σ(l) + (1-z) log(1-σ(l))] = softplus(l) - z·l
    let sum: f64 = logits
        .iter()
        .zip(z)
        .map(|(&l, &zk)| softplus(l) - if zk { l } else { 0.0 })
        .sum();
    Ok(sum / logits.len() as f64)
}

fn dim_loss_grad(logits: &[f64], z: &[bool]) -> Vec<f64> {
    let k = logits.len() as f64;
    logits
        .iter()
        .zip(z)
        .map(|(&l, &zk)| (logistic(l) - if zk { 1.0 } else { 0.0 }) / k)
        .collect()
}

pub fn unified_pair_loss(delta: f64, y: Verdict, margin: f64) -> f64 {
    match y {
        Verdict::Tie => delta * delta,
        _ => (margin - y.sign() * delta).max(0.0),
    }
}

/// Derivative of [`unified_pair_loss`] in `delta`.
pub fn unified_pair_loss_grad(delta: f64, y: Verdict, margin: f64) -> f64 {
    match y {
        Verdict::Tie => 2.0 * delta,
        _ if margin - y.sign() * delta > 0.0 => -y.sign(),
        _ => 0.0,
    }
}

pub fn rank_loss(
    scores_a: &[f64],
    scores_b: &[f64],
    z: &[bool],
    p: &[Verdict],
    margin: f64,
) -> Result<f64> {
    check_rank_shapes(scores_a, scores_b, z, p)?;
    let labeled = z.iter().filter(|&&b| b).count();
    if labeled == 0 {
        return Err(MdrError::NoLabeledDimensions);
    }
    let sum: f64 = (0..z.len())
        .filter(|&k| z[k])
        .map(|k| unified_pair_loss(scores_a[k] - scores_b[k], p[k], margin))
        .sum();
    Ok(sum / labeled as f64)
}

fn check_rank_shapes(a: &[f64], b: &[f64], z: &[bool], p: &[Verdict]) -> Result<()> {
    for len in [b.len(), z.len(), p.len()] {
        if len != a.len() {
            return Err(MdrError::shape("rank_loss", a.len(), len));
        }
    }
    Ok(())
}

pub fn overall_loss(reward_a: f64, reward_b: f64, o: Verdict, margin: f64) -> f64 {
    unified_pair_loss(reward_a - reward_b, o, margin)
}

/// Reward gradient with respect to scores and weight logits:
/// `dR/ds_k = α_k σ'(s_k)`, `dR/du_k = α_k (σ(s_k) - R)`.
fn reward_grads(out: &HeadOutputs) -> (Vec<f64>, Vec<f64>) {
    let mut ds = vec![0.0; out.scores.len()];
    let mut du = vec![0.0; out.scores.len()];
    for k in 0..out.scores.len() {
        let a = out.weights[k];
        if a == 0.0 {
            continue;
        }
        let sig = logistic(out.scores[k]);
        ds[k] = a * sig * (1.0 - sig);
        du[k] = a * (sig - out.reward);
    }
    (ds, du)
}

pub fn total_loss(input: PairLossInput<'_>, config: &LossConfig) -> Result<(LossBreakdown, OutputGradients)> {
    config.validate()?;
    let PairLossInput {
        outputs_a: a,
        outputs_b: b,
        labels,
    } = input;
    let k = a.scores.len();
    for len in [
        b.scores.len(),
        a.relevance_logits.len(),
        labels.z.len(),
        labels.p.len(),
        a.weight_logits.len(),
        b.weight_logits.len(),
    ] {
        if len != k {
            return Err(MdrError::shape("total_loss", k, len));
        }
    }

    let dim = dim_loss(&a.relevance_logits, &labels.z)?;
    let rank = rank_loss(&a.scores, &b.scores, &labels.z, &labels.p, config.margin)?;
    let delta_r = a.reward - b.reward;
    let overall = unified_pair_loss(delta_r, labels.o, config.margin);
    let total = config.lambda_dim * dim + config.lambda_rank * rank + config.lambda_overall * overall;
    if !total.is_finite() {
        return Err(MdrError::NonFinite {
            context: "total loss".into(),
        });
    }

    let mut g_l = dim_loss_grad(&a.relevance_logits, &labels.z);
    g_l.iter_mut().for_each(|g| *g *= config.lambda_dim);

    let mut g_sa = vec![0.0; k];
    let mut g_sb = vec![0.0; k];
    let labeled = labels.z.iter().filter(|&&b| b).count() as f64;
    for i in 0..k {
        if labels.z[i] {
            let g = config.lambda_rank
                * unified_pair_loss_grad(a.scores[i] - b.scores[i], labels.p[i], config.margin)
                / labeled;
            g_sa[i] += g;
            g_sb[i] -= g;
        }
    }

    let g_overall = config.lambda_overall * unified_pair_loss_grad(delta_r, labels.o, config.margin);
    let (ds_a, du_a) = reward_grads(a);
    let (ds_b, du_b) = reward_grads(b);
    let mut g_ua = vec![0.0; k];
    let mut g_ub = vec![0.0; k];
    if g_overall != 0.0 {
        for i in 0..k {
            g_sa[i] += g_overall * ds_a[i];
            g_sb[i] -= g_overall * ds_b[i];
            g_ua[i] = g_overall * du_a[i];
            g_ub[i] = -g_overall * du_b[i];
        }
    }

    Ok((
        LossBreakdown {
            dim,
            rank,
            overall,
            total,
        },
        OutputGradients {
            relevance_logits: g_l,
            scores_a: g_sa,
            scores_b: g_sb,
            weight_logits_a: g_ua,
            weight_logits_b: g_ub,
        },
    ))
}
