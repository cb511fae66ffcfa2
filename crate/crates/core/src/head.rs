//! The three decoupled heads and the masked reward aggregation.
//!
//! The dimension predictor and the weighting head read only the instruction
//! embedding `h_q`; the scorer reads only the response embedding `h_r`.
//! The reward is a masked softmax of the weight logits applied to the
//! logistic of the per-dimension scores.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{MdrError, Result};
use crate::kernel::{MlpStack, Mode};
use crate::taxonomy::NUM_DIMENSIONS;

/// Shapes and gating of the reward heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub d_in: usize,
    pub num_dims: usize,
    pub top_k: usize,
    pub dim_widths: Vec<usize>,
    pub score_widths: Vec<usize>,
    pub weight_widths: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        let k = NUM_DIMENSIONS;
        Self {
            d_in: 3584,
            num_dims: k,
            top_k: 3,
            dim_widths: vec![1024, 512, 512, k],
            score_widths: vec![2048, 1024, 1024, 512, k],
            weight_widths: vec![512, 512, 512, k],
            dropout_rate: 0.1,
        }
    }
}

impl HeadConfig {
    /// Default topology over a different embedding width.
    pub fn with_d_in(d_in: usize) -> Self {
        Self {
            d_in,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.num_dims == 0 {
            return Err(MdrError::InvalidConfig("d_in and num_dims must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_dims {
            return Err(MdrError::InvalidConfig(format!(
                "top_k = {} outside 1..={}",
                self.top_k, self.num_dims
            )));
        }
        for (name, widths) in [
            ("dim_widths", &self.dim_widths),
            ("score_widths", &self.score_widths),
            ("weight_widths", &self.weight_widths),
        ] {
            match widths.last() {
                None => return Err(MdrError::InvalidConfig(format!("{name} is empty"))),
                Some(&last) if last != self.num_dims => {
                    return Err(MdrError::InvalidConfig(format!(
                        "{name} must end in num_dims = {}, ends in {last}",
                        self.num_dims
                    )))
                }
                _ => {}
            }
            if widths.contains(&0) {
                return Err(MdrError::InvalidConfig(format!("{name} has a zero width")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(MdrError::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Parameter totals per head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub dimension: usize,
    pub scoring: usize,
    pub weighting: usize,
    pub total: usize,
}

fn stack_count(d_in: usize, widths: &[usize]) -> usize {
    let mut prev = d_in;
    widths
        .iter()
        .map(|&w| {
            let n = prev * w;
            prev = w;
            n
        })
        .sum()
}

pub fn count_parameters(config: &HeadConfig) -> ParameterCounts {
    let dimension = stack_count(config.d_in, &config.dim_widths);
    let scoring = stack_count(config.d_in, &config.score_widths);
    let weighting = stack_count(config.d_in, &config.weight_widths);
    ParameterCounts {
        dimension,
        scoring,
        weighting,
        total: dimension + scoring + weighting,
    }
}

/// Weights of the three heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParameters {
    /// Relevance logits from `h_q`.
    pub dimension: MlpStack,
    /// Per-dimension scores from `h_r`.
    pub scoring: MlpStack,
    /// Importance logits from `h_q`.
    pub weighting: MlpStack,
}

impl HeadParameters {
    pub fn init(config: &HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            dimension: MlpStack::init(config.d_in, &config.dim_widths, config.dropout_rate, seed)?,
            scoring: MlpStack::init(
                config.d_in,
                &config.score_widths,
                config.dropout_rate,
                seed.wrapping_add(1),
            )?,
            weighting: MlpStack::init(
                config.d_in,
                &config.weight_widths,
                config.dropout_rate,
                seed.wrapping_add(2),
            )?,
        })
    }

    pub fn zeros(config: &HeadConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            dimension: MlpStack::zeros(config.d_in, &config.dim_widths, config.dropout_rate)?,
            scoring: MlpStack::zeros(config.d_in, &config.score_widths, config.dropout_rate)?,
            weighting: MlpStack::zeros(config.d_in, &config.weight_widths, config.dropout_rate)?,
        })
    }

    pub fn stacks(&self) -> [&MlpStack; 3] {
        [&self.dimension, &self.scoring, &self.weighting]
    }

    pub fn stacks_mut(&mut self) -> [&mut MlpStack; 3] {
        [&mut self.dimension, &mut self.scoring, &mut self.weighting]
    }

    pub fn counts(&self) -> ParameterCounts {
        let [d, s, w] = self.stacks().map(MlpStack::param_count);
        ParameterCounts {
            dimension: d,
            scoring: s,
            weighting: w,
            total: d + s + w,
        }
    }

    /// Checks that the stacks have exactly the shapes `config` prescribes.
    pub fn conforms_to(&self, config: &HeadConfig) -> Result<()> {
        let expect = |widths: &[usize]| {
            let mut prev = config.d_in;
            widths
                .iter()
                .map(|&w| {
                    let shape = (w, prev);
                    prev = w;
                    shape
                })
                .collect::<Vec<_>>()
        };
        let checks = [
            ("dimension", &self.dimension, expect(&config.dim_widths)),
            ("scoring", &self.scoring, expect(&config.score_widths)),
            ("weighting", &self.weighting, expect(&config.weight_widths)),
        ];
        for (name, stack, shapes) in checks {
            if stack.shapes() != shapes {
                return Err(MdrError::Validation(format!(
                    "{name} head shapes {:?} do not match config {:?}",
                    stack.shapes(),
                    shapes
                )));
            }
        }
        Ok(())
    }
}

/// Where the aggregation mask comes from.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    /// Top-k of the predicted relevance probabilities.
    Predicted(usize),
    /// A supplied relevance vector, typically the ground-truth `z`.
    Given(&'a [bool]),
}

/// Everything one forward pass exposes, for one (instruction, response).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadOutputs {
    pub relevance_logits: Vec<f64>,
    pub relevance_probs: Vec<f64>,
    pub mask: Vec<bool>,
    pub scores: Vec<f64>,
    pub weight_logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub reward: f64,
}

impl HeadOutputs {
    /// Builds outputs from the raw head results.
    pub fn assemble(
        relevance_logits: Vec<f64>,
        mask: Vec<bool>,
        scores: Vec<f64>,
        weight_logits: Vec<f64>,
    ) -> Result<Self> {
        let k = relevance_logits.len();
        for (ctx, len) in [("scores", scores.len()), ("weight logits", weight_logits.len()), ("mask", mask.len())] {
            if len != k {
                return Err(MdrError::shape(ctx_static(ctx), k, len));
            }
        }
        let relevance_probs = relevance_logits.iter().map(|&l| logistic(l)).collect();
        let weights = masked_weights(&weight_logits, &mask)?;
        let reward = aggregate_reward(&weights, &scores)?;
        Ok(Self {
            relevance_logits,
            relevance_probs,
            mask,
            scores,
            weight_logits,
            weights,
            reward,
        })
    }

    /// Ids of masked-in dimensions, ascending.
    pub fn active_dims(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

fn ctx_static(ctx: &str) -> &'static str {
    match ctx {
        "scores" => "head outputs: scores",
        "weight logits" => "head outputs: weight logits",
        _ => "head outputs: mask",
    }
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mask of the `k` largest probabilities; ties go to the lower id.
pub fn topk_mask(probs: &[f64], k: usize) -> Result<Vec<bool>> {
    if k == 0 || k > probs.len() {
        return Err(MdrError::InvalidConfig(format!(
            "k = {k} outside 1..={}",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(MdrError::NonFinite {
            context: "top-k input".into(),
        });
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // Stable sort keeps ascending ids within equal probabilities.
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut mask = vec![false; probs.len()];
    for &i in &order[..k] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Softmax of `u` restricted to masked-in entries; masked-out weights are 0.
pub fn masked_weights(u: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if u.len() != mask.len() {
        return Err(MdrError::shape("masked_weights", u.len(), mask.len()));
    }
    let max = u
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(MdrError::EmptyMask);
    }
    if !max.is_finite() {
        return Err(MdrError::NonFinite {
            context: "weight logits".into(),
        });
    }
    let mut alpha: Vec<f64> = u
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= total);
    Ok(alpha)
}

/// Convex combination of the logistic scores.
pub fn aggregate_reward(alpha: &[f64], scores: &[f64]) -> Result<f64> {
    if alpha.len() != scores.len() {
        return Err(MdrError::shape("aggregate_reward", alpha.len(), scores.len()));
    }
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || alpha.iter().any(|&a| a < 0.0) {
        return Err(MdrError::NotConvex(sum));
    }
    Ok(alpha
        .iter()
        .zip(scores)
        .map(|(&a, &s)| if a == 0.0 { 0.0 } else { a * logistic(s) })
        .sum())
}

/// Configuration and weights together; the unit that is trained, saved and
/// used for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardHead {
    pub config: HeadConfig,
    pub params: HeadParameters,
}

impl RewardHead {
    pub fn new(config: HeadConfig, params: HeadParameters) -> Result<Self> {
        config.validate()?;
        params.conforms_to(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: HeadConfig, seed: u64) -> Result<Self> {
        let params = HeadParameters::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn zeros(config: HeadConfig) -> Result<Self> {
        let params = HeadParameters::zeros(&config)?;
        Ok(Self { config, params })
    }

    fn check_input(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.config.d_in {
            return Err(MdrError::shape("embedding width (d_in)", self.config.d_in, v.len()));
        }
        Ok(())
    }

    pub fn predict_dimensions(&self, h_q: &[f64]) -> Result<Vec<f64>> {
        self.check_input(h_q)?;
        self.params.dimension.infer(h_q)
    }

    pub fn score_dimensions(&self, h_r: &[f64]) -> Result<Vec<f64>> {
        self.check_input(h_r)?;
        self.params.scoring.infer(h_r)
    }

    pub fn weight_logits(&self, h_q: &[f64]) -> Result<Vec<f64>> {
        self.check_input(h_q)?;
        self.params.weighting.infer(h_q)
    }

    /// End-to-end pass for one response. In train mode, `seed` drives the
    /// dropout draws of all three heads.
    pub fn full_forward(
        &self,
        h_q: &[f64],
        h_r: &[f64],
        mask_source: MaskSource<'_>,
        mode: Mode,
        seed: u64,
    ) -> Result<HeadOutputs> {
        self.check_input(h_q)?;
        self.check_input(h_r)?;
        let seeds = head_seeds(seed);
        let (l, _) = self.params.dimension.forward(h_q, mode, seeds[0])?;
        let (s, _) = self.params.scoring.forward(h_r, mode, seeds[1])?;
        let (u, _) = self.params.weighting.forward(h_q, mode, seeds[2])?;
        let mask = resolve_mask(&l, mask_source, self.config.num_dims)?;
        HeadOutputs::assemble(l, mask, s, u)
    }

    /// Eval-mode rewards for a batch of (instruction, response) rows.
    pub fn score_batch(
        &self,
        h_q: ArrayView2<'_, f64>,
        h_r: ArrayView2<'_, f64>,
        mask_source: BatchMask<'_>,
    ) -> Result<Vec<HeadOutputs>> {
        if h_q.nrows() != h_r.nrows() {
            return Err(MdrError::shape("score_batch rows", h_q.nrows(), h_r.nrows()));
        }
        let l = self.params.dimension.infer_batch(h_q)?;
        let u = self.params.weighting.infer_batch(h_q)?;
        let s = self.params.scoring.infer_batch(h_r)?;
        self.assemble_rows(&l, &s, &u, mask_source)
    }

    pub(crate) fn assemble_rows(
        &self,
        l: &Array2<f64>,
        s: &Array2<f64>,
        u: &Array2<f64>,
        mask_source: BatchMask<'_>,
    ) -> Result<Vec<HeadOutputs>> {
        (0..l.nrows())
            .map(|i| {
                let li = l.row(i).to_vec();
                let source = match mask_source {
                    BatchMask::Predicted(k) => MaskSource::Predicted(k),
                    BatchMask::Given(masks) => MaskSource::Given(&masks[i]),
                };
                let mask = resolve_mask(&li, source, self.config.num_dims)?;
                HeadOutputs::assemble(li, mask, s.row(i).to_vec(), u.row(i).to_vec())
            })
            .collect()
    }
}

/// Mask source for a batch: one shared `k`, or one given mask per row.
#[derive(Debug, Clone, Copy)]
pub enum BatchMask<'a> {
    Predicted(usize),
    Given(&'a [Vec<bool>]),
}

pub(crate) fn resolve_mask(
    logits: &[f64],
    source: MaskSource<'_>,
    num_dims: usize,
) -> Result<Vec<bool>> {
    match source {
        MaskSource::Predicted(k) => {
            let probs: Vec<f64> = logits.iter().map(|&l| logistic(l)).collect();
            topk_mask(&probs, k)
        }
        MaskSource::Given(z) => {
            if z.len() != num_dims {
                return Err(MdrError::shape("given mask", num_dims, z.len()));
            }
            if !z.iter().any(|&b| b) {
                return Err(MdrError::EmptyMask);
            }
            Ok(z.to_vec())
        }
    }
}

/// Independent dropout seeds for the dimension, scoring and weighting heads.
pub fn head_seeds(seed: u64) -> [u64; 3] {
    [splitmix(seed ^ 0x01), splitmix(seed ^ 0x02), splitmix(seed ^ 0x03)]
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
