//! Pairwise accuracy metrics, top-k sweeps and best-of-N pair selection.
//!
//! Accuracy is strict: a pair counts as correct only when the chosen
//! response gets a strictly larger reward. Pairs labeled as overall ties
//! carry no chosen response and are excluded and counted separately.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::dataset::{gather_rows, CandidateSet, EmbeddingPairRecord, PairDataset, PreferenceLabels};
use crate::error::{MdrError, Result};
use crate::head::{BatchMask, HeadOutputs, RewardHead};
use crate::verdict::Verdict;

const SCORE_CHUNK: usize = 512;

/// Rewards of one labeled pair, oriented by the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub id: u64,
    pub reward_chosen: f64,
    pub reward_rejected: f64,
    pub category: Option<String>,
    pub group: Option<String>,
}

impl PairVerdict {
    pub fn correct(&self) -> bool {
        self.reward_chosen > self.reward_rejected
    }
}

fn check_finite(v: &[PairVerdict]) -> Result<()> {
    if v.is_empty() {
        return Err(MdrError::EmptyInput("verdicts"));
    }
    if let Some(bad) = v
        .iter()
        .find(|p| !p.reward_chosen.is_finite() || !p.reward_rejected.is_finite())
    {
        return Err(MdrError::NonFinite {
            context: format!("reward of pair {}", bad.id),
        });
    }
    Ok(())
}

pub fn overall_accuracy(verdicts: &[PairVerdict]) -> Result<f64> {
    check_finite(verdicts)?;
    let correct = verdicts.iter().filter(|v| v.correct()).count();
    Ok(correct as f64 / verdicts.len() as f64)
}

pub fn per_category_accuracy(verdicts: &[PairVerdict]) -> Result<BTreeMap<String, f64>> {
    check_finite(verdicts)?;
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for v in verdicts {
        let cat = v.category.as_ref().ok_or_else(|| {
            MdrError::Validation(format!("pair {} has no category", v.id))
        })?;
        let e = tally.entry(cat.clone()).or_default();
        e.0 += usize::from(v.correct());
        e.1 += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(c, (ok, n))| (c, ok as f64 / n as f64))
        .collect())
}

/// Unweighted mean of the per-category accuracies.
pub fn macro_accuracy(verdicts: &[PairVerdict]) -> Result<f64> {
    let per = per_category_accuracy(verdicts)?;
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

/// Fraction of groups whose pairs are all ranked correctly.
pub fn acc_plus(verdicts: &[PairVerdict]) -> Result<f64> {
    check_finite(verdicts)?;
    let mut groups: BTreeMap<&str, bool> = BTreeMap::new();
    for v in verdicts {
        let g = v
            .group
            .as_deref()
            .ok_or_else(|| MdrError::Validation(format!("pair {} has no group", v.id)))?;
        let all = groups.entry(g).or_insert(true);
        *all &= v.correct();
    }
    let ok = groups.values().filter(|&&b| b).count();
    Ok(ok as f64 / groups.len() as f64)
}

/// Mask used when scoring evaluation pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMask {
    /// Top-k of the predicted relevance.
    TopK(usize),
    /// Every dimension active, no gating.
    AllOnes,
}

/// Head outputs for both responses of a pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairOutputs {
    pub id: u64,
    pub a: HeadOutputs,
    pub b: HeadOutputs,
}

/// Eval-mode outputs for every pair, batched. The instruction-side heads run
/// once per pair and are shared by both responses.
pub fn score_pairs(
    head: &RewardHead,
    records: &[EmbeddingPairRecord],
    mask: EvalMask,
) -> Result<Vec<PairOutputs>> {
    let d = head.config.d_in;
    let num_dims = head.config.num_dims;
    let all_ones = vec![vec![true; num_dims]; SCORE_CHUNK];
    let mut out = Vec::with_capacity(records.len());
    let idx: Vec<usize> = (0..records.len()).collect();
    for chunk in idx.chunks(SCORE_CHUNK) {
        if let Some(r) = chunk.iter().map(|&i| &records[i]).find(|r| r.d_in() != d) {
            return Err(MdrError::shape("embedding width (d_in)", d, r.d_in()));
        }
        let hq = gather_rows(chunk, d, |i| &records[i].h_q);
        let ha = gather_rows(chunk, d, |i| &records[i].h_a);
        let hb = gather_rows(chunk, d, |i| &records[i].h_b);
        let l = head.params.dimension.infer_batch(hq.view())?;
        let u = head.params.weighting.infer_batch(hq.view())?;
        let sa = head.params.scoring.infer_batch(ha.view())?;
        let sb = head.params.scoring.infer_batch(hb.view())?;
        let source = match mask {
            EvalMask::TopK(k) => BatchMask::Predicted(k),
            EvalMask::AllOnes => BatchMask::Given(&all_ones[..chunk.len()]),
        };
        let a = head.assemble_rows(&l, &sa, &u, source)?;
        let b = head.assemble_rows(&l, &sb, &u, source)?;
        for ((&i, a), b) in chunk.iter().zip(a).zip(b) {
            out.push(PairOutputs {
                id: records[i].id,
                a,
                b,
            });
        }
    }
    Ok(out)
}

/// Orients scored pairs by their labels. Returns the verdicts and the number
/// of pairs skipped for an overall tie label.
pub fn verdicts_from_outputs(
    outputs: &[PairOutputs],
    labels: &[PreferenceLabels],
) -> Result<(Vec<PairVerdict>, usize)> {
    if outputs.len() != labels.len() {
        return Err(MdrError::shape("pairs vs labels", outputs.len(), labels.len()));
    }
    let mut verdicts = Vec::with_capacity(outputs.len());
    let mut ties = 0;
    for (o, l) in outputs.iter().zip(labels) {
        if o.id != l.id {
            return Err(MdrError::Validation(format!(
                "pair {} is aligned with labels of sample {}",
                o.id, l.id
            )));
        }
        let (chosen, rejected) = match l.o {
            Verdict::PreferA => (o.a.reward, o.b.reward),
            Verdict::PreferB => (o.b.reward, o.a.reward),
            Verdict::Tie => {
                ties += 1;
                continue;
            }
        };
        verdicts.push(PairVerdict {
            id: o.id,
            reward_chosen: chosen,
            reward_rejected: rejected,
            category: l.category.clone(),
            group: l.group.clone(),
        });
    }
    Ok((verdicts, ties))
}

pub fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: Option<usize>,
    pub pairs: usize,
    /// Pairs counted by the accuracy metrics (overall label not a tie).
    pub evaluated: usize,
    pub excluded_ties: usize,
    pub overall_accuracy: f64,
    /// Present when every pair has a category.
    pub macro_accuracy: Option<f64>,
    pub per_category: BTreeMap<String, f64>,
    /// Present when every pair has a group.
    pub acc_plus: Option<f64>,
    /// Mean Jaccard index between the scoring mask and the labeled `z`.
    pub mean_jaccard: f64,
    /// Sign agreement of per-dimension score gaps with strict labels.
    pub per_dimension_accuracy: Option<f64>,
}

pub fn report_from_outputs(
    outputs: &[PairOutputs],
    labels: &[PreferenceLabels],
    k: Option<usize>,
) -> Result<EvalReport> {
    let (verdicts, ties) = verdicts_from_outputs(outputs, labels)?;
    let num_dims = outputs.first().map_or(0, |o| o.a.mask.len());
    let overall = overall_accuracy(&verdicts)?;
    let categorized = verdicts.iter().all(|v| v.category.is_some());
    let grouped = verdicts.iter().all(|v| v.group.is_some());
    let per_category = if categorized {
        per_category_accuracy(&verdicts)?
    } else {
        BTreeMap::new()
    };
    let macro_acc = categorized.then(|| per_category.values().sum::<f64>() / per_category.len() as f64);
    let acc_plus = if grouped { Some(acc_plus(&verdicts)?) } else { None };
    let mut jac = 0.0;
    let (mut dim_ok, mut dim_n) = (0usize, 0usize);
    for (o, l) in outputs.iter().zip(labels) {
        jac += jaccard(&o.a.mask, &l.relevance_mask(num_dims));
        for (&kdim, &v) in &l.p {
            if v.is_tie() {
                continue;
            }
            let gap = o.a.scores[kdim] - o.b.scores[kdim];
            dim_n += 1;
            dim_ok += usize::from(gap * v.sign() > 0.0);
        }
    }
    Ok(EvalReport {
        k,
        pairs: outputs.len(),
        evaluated: verdicts.len(),
        excluded_ties: ties,
        overall_accuracy: overall,
        macro_accuracy: macro_acc,
        per_category,
        acc_plus,
        mean_jaccard: jac / outputs.len() as f64,
        per_dimension_accuracy: (dim_n > 0).then(|| dim_ok as f64 / dim_n as f64),
    })
}

/// Scores `data` with predicted top-`k` masks and reports every metric.
pub fn evaluate(head: &RewardHead, data: &PairDataset, k: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(MdrError::EmptyInput("evaluation set"));
    }
    let outputs = score_pairs(head, &data.records, EvalMask::TopK(k))?;
    report_from_outputs(&outputs, &data.labels, Some(k))
}

/// [`evaluate`] with every `k` in `ks`.
pub fn topk_sweep(head: &RewardHead, data: &PairDataset, ks: &[usize]) -> Result<Vec<EvalReport>> {
    ks.iter().map(|&k| evaluate(head, data, k)).collect()
}

/// Rewards of every candidate, with the model's own top-k mask per prompt.
pub fn score_candidates(head: &RewardHead, sets: &[CandidateSet], k: usize) -> Result<Vec<Vec<f64>>> {
    let d = head.config.d_in;
    sets.iter()
        .map(|set| {
            if set.h_q.len() != d {
                return Err(MdrError::shape("embedding width (d_in)", d, set.h_q.len()));
            }
            let n = set.responses.len();
            let mut flat = Vec::with_capacity(n * d);
            for r in &set.responses {
                if r.len() != d {
                    return Err(MdrError::shape("embedding width (d_in)", d, r.len()));
                }
                flat.extend(r.iter().map(|&x| f64::from(x)));
            }
            let hr = ArrayView2::from_shape((n, d), &flat).expect("row-major candidate block");
            let hq1: Vec<f64> = set.h_q.iter().map(|&x| f64::from(x)).collect();
            let hq1 = ArrayView2::from_shape((1, d), &hq1).expect("single row");
            let l = head.params.dimension.infer_batch(hq1)?;
            let u = head.params.weighting.infer_batch(hq1)?;
            let s = head.params.scoring.infer_batch(hr)?;
            let l = l.broadcast((n, l.ncols())).unwrap().to_owned();
            let u = u.broadcast((n, u.ncols())).unwrap().to_owned();
            let outs = head.assemble_rows(&l, &s, &u, BatchMask::Predicted(k))?;
            Ok(outs.into_iter().map(|o| o.reward).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoPair {
    pub prompt_id: u64,
    pub chosen: usize,
    pub rejected: usize,
    pub reward_chosen: f64,
    pub reward_rejected: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DpoSelection {
    pub pairs: Vec<DpoPair>,
    /// Prompts whose candidates all received the same reward.
    pub degenerate: Vec<u64>,
}

/// Highest-reward candidate as chosen, lowest as rejected. Ties resolve to
/// the lowest candidate index; sets with all-equal rewards are dropped.
pub fn build_dpo_pairs(rewards: &[(u64, Vec<f64>)]) -> Result<DpoSelection> {
    let mut sel = DpoSelection::default();
    for (prompt_id, r) in rewards {
        if r.len() < 2 {
            return Err(MdrError::Validation(format!(
                "prompt {prompt_id} has {} candidates, need at least 2",
                r.len()
            )));
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(MdrError::NonFinite {
                context: format!("candidate reward of prompt {prompt_id}"),
            });
        }
        let (mut hi, mut lo) = (0, 0);
        for i in 1..r.len() {
            if r[i] > r[hi] {
                hi = i;
            }
            if r[i] < r[lo] {
                lo = i;
            }
        }
        if hi == lo {
            sel.degenerate.push(*prompt_id);
            continue;
        }
        sel.pairs.push(DpoPair {
            prompt_id: *prompt_id,
            chosen: hi,
            rejected: lo,
            reward_chosen: r[hi],
            reward_rejected: r[lo],
        });
    }
    Ok(sel)
}
