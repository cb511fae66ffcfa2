//! Mini-batch training with AdamW and a warmup-cosine schedule.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{gather_rows, PairDataset};
use crate::error::{MdrError, Result};
use crate::head::{head_seeds, splitmix, topk_mask, HeadOutputs, HeadParameters, RewardHead};
use crate::head::logistic;
use crate::kernel::Mode;
use crate::objectives::{total_loss, DenseLabels, LossBreakdown, LossConfig, PairLossInput};

/// Which mask aggregates the reward inside the overall loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMask {
    /// The labeled relevant set `z`.
    #[default]
    Given,
    /// Top-k of the predicted relevance, treated as a constant.
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub global_batch: usize,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Worker threads per batch. Results are reproducible for a fixed count.
    pub threads: usize,
    pub mask_source: TrainMask,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            global_batch: 64,
            base_lr: 1e-4,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            threads: 1,
            mask_source: TrainMask::Given,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.global_batch == 0 || self.threads == 0 {
            return Err(MdrError::InvalidConfig("global_batch and threads must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(MdrError::InvalidConfig(format!(
                "warmup_ratio {} outside [0, 1)",
                self.warmup_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(MdrError::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if self.epochs == 0 || !(self.base_lr > 0.0) {
            return Err(MdrError::InvalidConfig("epochs and base_lr must be positive".into()));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("eps", self.eps),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(MdrError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.global_batch)
    }
}

/// Learning rate at 0-based `step` of `total_steps`: linear warmup from 0
/// over the first `warmup_ratio` of training, then cosine decay reaching 0
/// at `step == total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(MdrError::InvalidConfig("schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(MdrError::InvalidConfig(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    let base = config.base_lr;
    let t = step as f64;
    let warm = config.warmup_ratio * total_steps as f64;
    if t < warm {
        return Ok(base * t / warm);
    }
    let progress = (t - warm) / (total_steps as f64 - warm);
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Weight gradients in the same layout as [`HeadParameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub dimension: Vec<Array2<f64>>,
    pub scoring: Vec<Array2<f64>>,
    pub weighting: Vec<Array2<f64>>,
}

impl HeadGradients {
    pub fn zeros_like(params: &HeadParameters) -> Self {
        let z = |s: &crate::kernel::MlpStack| {
            s.layers()
                .iter()
                .map(|l| Array2::zeros(l.weight().raw_dim()))
                .collect()
        };
        Self {
            dimension: z(&params.dimension),
            scoring: z(&params.scoring),
            weighting: z(&params.weighting),
        }
    }

    pub fn stacks(&self) -> [&Vec<Array2<f64>>; 3] {
        [&self.dimension, &self.scoring, &self.weighting]
    }

    fn stacks_mut(&mut self) -> [&mut Vec<Array2<f64>>; 3] {
        [&mut self.dimension, &mut self.scoring, &mut self.weighting]
    }

    pub fn add_assign(&mut self, other: &HeadGradients) {
        for (mine, theirs) in self.stacks_mut().into_iter().zip(other.stacks()) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.stacks()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// First non-finite entry as `(stack, layer)`.
    pub fn find_non_finite(&self) -> Option<(&'static str, usize)> {
        let names = ["dimension", "scoring", "weighting"];
        for (name, stack) in names.into_iter().zip(self.stacks()) {
            if let Some(i) = stack.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
                return Some((name, i));
            }
        }
        None
    }
}

/// First and second moment accumulators of AdamW, one per weight.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: HeadGradients,
    pub v: HeadGradients,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &HeadParameters) -> Self {
        Self {
            m: HeadGradients::zeros_like(params),
            v: HeadGradients::zeros_like(params),
            step: 0,
        }
    }
}

/// Hyperparameters of one AdamW update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// Bias-corrected AdamW update of one tensor at 1-based step `t`:
/// `w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)`.
pub fn adamw_update(
    w: ndarray::ArrayViewMut2<'_, f64>,
    g: ndarray::ArrayView2<'_, f64>,
    m: ndarray::ArrayViewMut2<'_, f64>,
    v: ndarray::ArrayViewMut2<'_, f64>,
    t: u64,
    lr: f64,
    hp: AdamWParams,
) {
    let AdamWParams {
        beta1: b1,
        beta2: b2,
        eps,
        weight_decay,
    } = hp;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    ndarray::Zip::from(w)
        .and(g)
        .and(m)
        .and(v)
        .for_each(|w, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let adaptive = (*m / c1) / ((*v / c2).sqrt() + eps);
            *w -= lr * (adaptive + weight_decay * *w);
        });
}

/// One optimizer step over all heads. Non-finite gradients abort before any
/// parameter or moment changes.
pub fn optimizer_step(
    params: &mut HeadParameters,
    grads: &HeadGradients,
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if let Some((stack, layer)) = grads.find_non_finite() {
        return Err(MdrError::NonFinite {
            context: format!("gradient of {stack} head, layer {layer}"),
        });
    }
    state.step += 1;
    let hp = AdamWParams::from(config);
    let t = state.step;
    let moments = state.m.stacks_mut().into_iter().zip(state.v.stacks_mut());
    for ((stack, g), (m, v)) in params.stacks_mut().into_iter().zip(grads.stacks()).zip(moments) {
        for (i, layer) in stack.layers_mut().iter_mut().enumerate() {
            adamw_update(
                layer.weight_mut().view_mut(),
                g[i].view(),
                m[i].view_mut(),
                v[i].view_mut(),
                t,
                lr,
                hp,
            );
        }
    }
    Ok(())
}

/// A set of pairs in row-major batch form with dense labels.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub h_q: Array2<f64>,
    pub h_a: Array2<f64>,
    pub h_b: Array2<f64>,
    pub labels: Vec<DenseLabels>,
}

impl PairBatch {
    pub fn from_dataset(ds: &PairDataset, dense: &[DenseLabels], idx: &[usize]) -> Self {
        let d = ds.d_in();
        Self {
            h_q: gather_rows(idx, d, |i| &ds.records[i].h_q),
            h_a: gather_rows(idx, d, |i| &ds.records[i].h_a),
            h_b: gather_rows(idx, d, |i| &ds.records[i].h_b),
            labels: idx.iter().map(|&i| dense[i].clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn rows(&self, start: usize, end: usize) -> PairBatch {
        let s = ndarray::s![start..end, ..];
        PairBatch {
            h_q: self.h_q.slice(s).to_owned(),
            h_a: self.h_a.slice(s).to_owned(),
            h_b: self.h_b.slice(s).to_owned(),
            labels: self.labels[start..end].to_vec(),
        }
    }
}

/// Sum over rows of `scale * loss_i` and its weight gradient.
///
/// All three heads run batched; the scoring head sees the A rows followed by
/// the B rows as one batch.
pub fn batch_gradients(
    head: &RewardHead,
    batch: &PairBatch,
    loss: &LossConfig,
    mask_source: TrainMask,
    mode: Mode,
    seed: u64,
    scale: f64,
) -> Result<(LossBreakdown, HeadGradients)> {
    let n = batch.len();
    let k = head.config.num_dims;
    let params = &head.params;
    let seeds = head_seeds(seed);
    let (l, tape_d) = params.dimension.forward_batch(batch.h_q.view(), mode, seeds[0])?;
    let h_r = ndarray::concatenate(Axis(0), &[batch.h_a.view(), batch.h_b.view()])
        .map_err(|_| MdrError::shape("pair batch width", batch.h_a.ncols(), batch.h_b.ncols()))?;
    let (s, tape_s) = params.scoring.forward_batch(h_r.view(), mode, seeds[1])?;
    let (u, tape_w) = params.weighting.forward_batch(batch.h_q.view(), mode, seeds[2])?;

    let mut g_l = Array2::zeros((n, k));
    let mut g_s = Array2::zeros((2 * n, k));
    let mut g_u = Array2::zeros((n, k));
    let mut sum = LossBreakdown::default();
    for (i, labels) in batch.labels.iter().enumerate() {
        let li = l.row(i).to_vec();
        let mask = match mask_source {
            TrainMask::Given => labels.z.clone(),
            TrainMask::Predicted => {
                let probs: Vec<f64> = li.iter().map(|&x| logistic(x)).collect();
                topk_mask(&probs, head.config.top_k)?
            }
        };
        let ui = u.row(i).to_vec();
        let out_a = HeadOutputs::assemble(li.clone(), mask.clone(), s.row(i).to_vec(), ui.clone())?;
        let out_b = HeadOutputs::assemble(li, mask, s.row(n + i).to_vec(), ui)?;
        let (parts, g) = total_loss(
            PairLossInput {
                outputs_a: &out_a,
                outputs_b: &out_b,
                labels,
            },
            loss,
        )?;
        sum.add_scaled(&parts, scale);
        for j in 0..k {
            g_l[[i, j]] = scale * g.relevance_logits[j];
            g_s[[i, j]] = scale * g.scores_a[j];
            g_s[[n + i, j]] = scale * g.scores_b[j];
            g_u[[i, j]] = scale * (g.weight_logits_a[j] + g.weight_logits_b[j]);
        }
    }
    let (dimension, _) = params.dimension.backward(&tape_d, g_l.view())?;
    let (scoring, _) = params.scoring.backward(&tape_s, g_s.view())?;
    let (weighting, _) = params.weighting.backward(&tape_w, g_u.view())?;
    Ok((
        sum,
        HeadGradients {
            dimension,
            scoring,
            weighting,
        },
    ))
}

/// Mean loss and gradient over a batch, split into `threads` contiguous
/// chunks whose results are reduced in chunk order.
pub fn mean_batch_gradients(
    head: &RewardHead,
    batch: &PairBatch,
    config: &TrainConfig,
    mode: Mode,
    seed: u64,
) -> Result<(LossBreakdown, HeadGradients)> {
    let n = batch.len();
    if n == 0 {
        return Err(MdrError::EmptyInput("training batch"));
    }
    let scale = 1.0 / n as f64;
    let threads = config.threads.min(n);
    if threads <= 1 {
        return batch_gradients(head, batch, &config.loss, config.mask_source, mode, seed, scale);
    }
    let chunk = n.div_ceil(threads);
    let parts: Vec<PairBatch> = (0..n)
        .step_by(chunk)
        .map(|start| batch.rows(start, (start + chunk).min(n)))
        .collect();
    let results: Vec<Result<(LossBreakdown, HeadGradients)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = parts
            .iter()
            .enumerate()
            .map(|(c, part)| {
                let chunk_seed = splitmix(seed ^ (c as u64).wrapping_mul(0xA24B_AED4_963E_E407));
                scope.spawn(move || {
                    batch_gradients(head, part, &config.loss, config.mask_source, mode, chunk_seed, scale)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    });
    let mut iter = results.into_iter();
    let (mut loss, mut grads) = iter.next().unwrap()?;
    for r in iter {
        let (l, g) = r?;
        loss.add_scaled(&l, 1.0);
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

/// Mean eval-mode loss over a dataset.
pub fn evaluate_loss(head: &RewardHead, ds: &PairDataset, config: &TrainConfig) -> Result<LossBreakdown> {
    let dense = dense_labels(head, ds)?;
    let mut total = LossBreakdown::default();
    let scale = 1.0 / ds.len() as f64;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(256) {
        let batch = PairBatch::from_dataset(ds, &dense, chunk);
        let (l, _) = batch_gradients(head, &batch, &config.loss, config.mask_source, Mode::Eval, 0, scale)?;
        total.add_scaled(&l, 1.0);
    }
    Ok(total)
}

fn dense_labels(head: &RewardHead, ds: &PairDataset) -> Result<Vec<DenseLabels>> {
    if ds.is_empty() {
        return Err(MdrError::EmptyInput("dataset"));
    }
    if ds.d_in() != head.config.d_in {
        return Err(MdrError::shape("embedding width (d_in)", head.config.d_in, ds.d_in()));
    }
    ds.labels
        .iter()
        .map(|l| {
            l.validate(head.config.num_dims)?;
            Ok(l.to_dense(head.config.num_dims))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: LossBreakdown,
    pub validation_loss: Option<LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_head: RewardHead,
    pub best_head: RewardHead,
    /// Epoch of `best_head`, by validation loss when a validation set was
    /// given and by mean training loss otherwise.
    pub best_epoch: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(epoch as u64 + 1)));
    idx.shuffle(&mut rng);
    idx
}

/// Trains `head` and returns the final and best heads.
/// `on_step` sees every optimizer step as it happens.
pub fn train(
    head: RewardHead,
    data: &PairDataset,
    validation: Option<&PairDataset>,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    head.config.validate()?;
    let dense = dense_labels(&head, data)?;
    if let Some(v) = validation {
        dense_labels(&head, v)?;
    }
    let per_epoch = config.steps_per_epoch(data.len());
    let total_steps = per_epoch * config.epochs;
    let mut head = head;
    let mut opt = OptimizerState::new(&head.params);
    let mut best: Option<(f64, usize, RewardHead)> = None;
    let mut steps = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let order = epoch_permutation(data.len(), config.seed, epoch);
        let mut epoch_loss = LossBreakdown::default();
        for idx in order.chunks(config.global_batch) {
            let batch = PairBatch::from_dataset(data, &dense, idx);
            let step_seed = splitmix(config.seed.wrapping_add(0x5EED) ^ splitmix(step as u64));
            let lr = lr_at(step, total_steps, config)?;
            let (loss, grads) = mean_batch_gradients(&head, &batch, config, Mode::Train, step_seed)
                .map_err(|e| annotate(e, step, epoch))?;
            optimizer_step(&mut head.params, &grads, &mut opt, lr, config)
                .map_err(|e| annotate(e, step, epoch))?;
            epoch_loss.add_scaled(&loss, idx.len() as f64 / data.len() as f64);
            let record = StepRecord {
                step,
                epoch,
                lr,
                loss,
                grad_norm: grads.l2_norm(),
            };
            on_step(&record);
            steps.push(record);
            step += 1;
        }
        let validation_loss = validation
            .map(|v| evaluate_loss(&head, v, config))
            .transpose()?;
        let criterion = validation_loss.as_ref().map_or(epoch_loss.total, |v| v.total);
        if best.as_ref().is_none_or(|(b, _, _)| criterion < *b) {
            best = Some((criterion, epoch, head.clone()));
        }
        epochs.push(EpochSummary {
            epoch,
            train_loss: epoch_loss,
            validation_loss,
        });
    }
    let (best_head, best_epoch) = match best {
        Some((_, e, h)) => (h, e),
        None => (head.clone(), 0),
    };
    Ok(TrainOutcome {
        final_head: head,
        best_head,
        best_epoch,
        steps,
        epochs,
    })
}

fn annotate(e: MdrError, step: usize, epoch: usize) -> MdrError {
    match e {
        MdrError::NonFinite { context } => MdrError::NonFinite {
            context: format!("{context} at step {step} (epoch {epoch})"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::HeadConfig;
    use crate::synth::{generate, SynthConfig};

    fn tiny() -> (RewardHead, PairDataset) {
        let cfg = HeadConfig {
            d_in: 8,
            num_dims: 21,
            top_k: 3,
            dim_widths: vec![16, 21],
            score_widths: vec![16, 21],
            weight_widths: vec![8, 21],
            dropout_rate: 0.1,
        };
        let data = generate(&SynthConfig {
            n_samples: 40,
            d_in: 8,
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap()
        .dataset;
        (RewardHead::init(cfg, 1).unwrap(), data)
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig::default();
        let lr = |t| lr_at(t, 100, &cfg).unwrap();
        assert_eq!(lr(0), 0.0);
        assert!((lr(5) - 0.5e-4).abs() < 1e-15);
        assert!((lr(10) - 1e-4).abs() < 1e-15);
        assert!((lr(55) - 0.5e-4).abs() < 1e-12);
        assert!(lr(100).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for t in 10..=100 {
            assert!(lr(t) <= last);
            last = lr(t);
        }
        assert!(lr_at(0, 0, &cfg).is_err());
        assert!(lr_at(101, 100, &cfg).is_err());
    }

    #[test]
    fn adamw_first_step_matches_closed_form() {
        let (head, _) = tiny();
        let mut params = head.params.clone();
        let mut grads = HeadGradients::zeros_like(&params);
        grads.dimension[0].fill(0.5);
        let cfg = TrainConfig::default();
        let mut state = OptimizerState::new(&params);
        optimizer_step(&mut params, &grads, &mut state, 1e-3, &cfg).unwrap();
        let before = head.params.dimension.layers()[0].weight()[[0, 0]];
        let after = params.dimension.layers()[0].weight()[[0, 0]];
        let expected = before - 1e-3 * (0.5 / (0.5 + 1e-8) + 0.01 * before);
        assert!((after - expected).abs() < 1e-15);
        let w_before = head.params.scoring.layers()[0].weight()[[0, 0]];
        let w_after = params.scoring.layers()[0].weight()[[0, 0]];
        assert!((w_after - w_before * (1.0 - 1e-5)).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let (head, _) = tiny();
        let mut params = head.params.clone();
        let grads = HeadGradients::zeros_like(&params);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new(&params);
        for _ in 0..3 {
            optimizer_step(&mut params, &grads, &mut state, 1e-2, &cfg).unwrap();
        }
        assert_eq!(params, head.params);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let (head, _) = tiny();
        let mut params = head.params.clone();
        let mut grads = HeadGradients::zeros_like(&params);
        grads.weighting[1][[2, 3]] = f64::NAN;
        let mut state = OptimizerState::new(&params);
        let err = optimizer_step(&mut params, &grads, &mut state, 1e-3, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("weighting"), "{err}");
        assert_eq!(params, head.params);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let (head, data) = tiny();
        let cfg = TrainConfig {
            global_batch: 16,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(head.clone(), &data, None, &cfg, |_| {}).unwrap();
        let b = train(head, &data, None, &cfg, |_| {}).unwrap();
        assert_eq!(a.final_head, b.final_head);
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.steps.len(), 6);
    }

    #[test]
    fn threaded_gradients_match_serial_in_eval_mode() {
        let (head, data) = tiny();
        let dense: Vec<_> = data.labels.iter().map(|l| l.to_dense(21)).collect();
        let idx: Vec<usize> = (0..20).collect();
        let batch = PairBatch::from_dataset(&data, &dense, &idx);
        let serial = TrainConfig::default();
        let par = TrainConfig {
            threads: 3,
            ..TrainConfig::default()
        };
        let (l1, g1) = mean_batch_gradients(&head, &batch, &serial, Mode::Eval, 0).unwrap();
        let (l2, g2) = mean_batch_gradients(&head, &batch, &par, Mode::Eval, 0).unwrap();
        assert!((l1.total - l2.total).abs() < 1e-12);
        for (a, b) in g1.stacks().iter().zip(g2.stacks()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).iter().all(|d| d.abs() < 1e-12));
            }
        }
    }
}
