//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL line.
//!
//! Runs as a plain binary (`harness = false`) so the lines appear without
//! `--nocapture`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mdr_core::checkpoint::{decode_checkpoint, encode_checkpoint, CheckpointMeta};
use mdr_core::consensus::{
    format_percent, read_annotations, read_ground_truth, run_pipeline, FilterReport, GroundTruth,
    JudgeAnnotation,
};
use mdr_core::dataset::{decode_embeddings, encode_embeddings, read_embeddings, write_embeddings, PairDataset};
use mdr_core::eval::{
    acc_plus, evaluate, macro_accuracy, overall_accuracy, per_category_accuracy, score_pairs, EvalMask,
    PairVerdict,
};
use mdr_core::head::{aggregate_reward, head_seeds, logistic, masked_weights, topk_mask};
use mdr_core::objectives::{dim_loss, unified_pair_loss, DenseLabels};
use mdr_core::synth::{generate, SynthConfig};
use mdr_core::trainer::{batch_gradients, PairBatch};
use mdr_core::{
    count_parameters, train, HeadConfig, HeadOutputs, HeadParameters, LinearLayer, LossConfig, MlpStack, Mode,
    RewardHead, TrainConfig, TrainMask, Verdict,
};
use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

/// Criteria that cannot pass as stated, with the reason printed beside FAIL.
const UNATTAINABLE: &[(&str, &str)] = &[(
    "parameter counts",
    "the reference weighting subtotal 2,370,816 is 768 above the product of its layer shapes",
)];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn parameter_counts() -> Outcome {
    let start = Instant::now();
    let c = count_parameters(&HeadConfig::default());
    within(start.elapsed(), Duration::from_secs(1))?;
    let expected = [
        ("dimension", c.dimension, 4_467_200),
        ("scoring", c.scoring, 11_020_800),
        ("weighting", c.weighting, 2_370_816),
        ("total", c.total, 17_858_816),
    ];
    let wrong: Vec<String> = expected
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(name, got, want)| format!("{name} {got} != {want}"))
        .collect();
    ensure(wrong.is_empty(), || wrong.join(", "))?;
    Ok(format!("total {}", c.total))
}

fn masked_aggregation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let k = 21;
    let mut worst_sum = 0.0f64;
    let mut worst_shift = 0.0f64;
    for draw in 0..100_000 {
        let spread = rng.random_range(0.1..20.0);
        let u: Vec<f64> = (0..k).map(|_| spread * normal(&mut rng)).collect();
        let mut mask: Vec<bool> = (0..k).map(|_| rng.random_bool(0.3)).collect();
        if !mask.contains(&true) {
            mask[rng.random_range(0..k)] = true;
        }
        let alpha = masked_weights(&u, &mask).map_err(|e| e.to_string())?;
        let sum: f64 = alpha.iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        ensure(
            alpha.iter().zip(&mask).all(|(&a, &m)| m || a == 0.0),
            || format!("draw {draw}: masked-out weight is non-zero"),
        )?;
        let shift = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = u.iter().map(|&x| x + shift).collect();
        let beta = masked_weights(&shifted, &mask).map_err(|e| e.to_string())?;
        for (a, b) in alpha.iter().zip(&beta) {
            worst_shift = worst_shift.max((a - b).abs());
        }
        let s: Vec<f64> = (0..k).map(|_| rng.random_range(-30.0..30.0)).collect();
        let r = aggregate_reward(&alpha, &s).map_err(|e| e.to_string())?;
        ensure(r > 0.0 && r < 1.0, || format!("draw {draw}: reward {r} outside (0, 1)"))?;
    }
    ensure(worst_sum < 1e-12, || format!("|sum - 1| reached {worst_sum:e}"))?;
    ensure(worst_shift < 1e-12, || format!("shift changed weights by {worst_shift:e}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("max |sum-1| {worst_sum:.1e}, max shift drift {worst_shift:.1e}"))
}

fn loss_unit_values() -> Outcome {
    let xi = 0.3;
    let cases = [
        ("l(0.5, +1)", unified_pair_loss(0.5, Verdict::PreferA, xi), 0.0),
        ("l(0.1, +1)", unified_pair_loss(0.1, Verdict::PreferA, xi), 0.2),
        ("l(0.3, 0)", unified_pair_loss(0.3, Verdict::Tie, xi), 0.09),
        (
            "dim_loss([0,0],[1,0])",
            dim_loss(&[0.0, 0.0], &[true, false]).map_err(|e| e.to_string())?,
            std::f64::consts::LN_2,
        ),
    ];
    for (name, got, want) in cases {
        ensure((got - want).abs() < 1e-12, || format!("{name} = {got}, expected {want}"))?;
    }
    Ok("4 values within 1e-12".into())
}

// Gradient check.

const FD_STEP: f64 = 1e-6;
const KINK_BAND: f64 = 1e-7;
/// Relative errors are taken against max(|analytic|, |numeric|, floor).
const FD_FLOOR: f64 = 1e-3;

fn random_stack(rng: &mut ChaCha8Rng, fan_in: usize, widths: &[usize], dropout: f64) -> MlpStack {
    let mut prev = fan_in;
    let layers = widths
        .iter()
        .map(|&w| {
            let scale = (2.0 / prev as f64).sqrt();
            let weight = Array2::from_shape_fn((w, prev), |_| scale * normal(rng));
            prev = w;
            LinearLayer::new(weight).unwrap()
        })
        .collect();
    MlpStack::new(layers, dropout).unwrap()
}

fn random_widths(rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
    let depth = rng.random_range(1..=3);
    let mut w: Vec<usize> = (0..depth).map(|_| rng.random_range(3..=8)).collect();
    w.push(k);
    w
}

fn random_verdict(rng: &mut ChaCha8Rng) -> Verdict {
    [Verdict::PreferB, Verdict::Tie, Verdict::PreferA][rng.random_range(0..3)]
}

struct FdCase {
    head: RewardHead,
    batch: PairBatch,
    loss: LossConfig,
    mask: TrainMask,
    mode: Mode,
    seed: u64,
}

fn fd_case(rng: &mut ChaCha8Rng) -> FdCase {
    let k = rng.random_range(3..=6);
    let d = rng.random_range(3..=6);
    let dropout = if rng.random_bool(0.5) { 0.3 } else { 0.0 };
    let config = HeadConfig {
        d_in: d,
        num_dims: k,
        top_k: rng.random_range(1..=k),
        dim_widths: random_widths(rng, k),
        score_widths: random_widths(rng, k),
        weight_widths: random_widths(rng, k),
        dropout_rate: dropout,
    };
    let params = HeadParameters {
        dimension: random_stack(rng, d, &config.dim_widths, dropout),
        scoring: random_stack(rng, d, &config.score_widths, dropout),
        weighting: random_stack(rng, d, &config.weight_widths, dropout),
    };
    let head = RewardHead::new(config, params).unwrap();
    let n = 3;
    let mut rows = || Array2::from_shape_fn((n, d), |_| normal(rng));
    let (h_q, h_a, h_b) = (rows(), rows(), rows());
    let labels = (0..n)
        .map(|_| {
            let mut z: Vec<bool> = (0..k).map(|_| rng.random_bool(0.5)).collect();
            if !z.contains(&true) {
                z[0] = true;
            }
            DenseLabels {
                z,
                p: (0..k).map(|_| random_verdict(rng)).collect(),
                o: random_verdict(rng),
            }
        })
        .collect();
    let loss = LossConfig {
        margin: 0.3,
        lambda_dim: rng.random_range(0.2..1.5),
        lambda_rank: rng.random_range(0.2..1.5),
        lambda_overall: rng.random_range(0.2..1.5),
    };
    FdCase {
        head,
        batch: PairBatch { h_q, h_a, h_b, labels },
        loss,
        mask: if rng.random_bool(0.5) { TrainMask::Given } else { TrainMask::Predicted },
        mode: if dropout > 0.0 { Mode::Train } else { Mode::Eval },
        seed: rng.random(),
    }
}

/// Batch mean, as in training.
fn fd_scale(case: &FdCase) -> f64 {
    1.0 / case.batch.len() as f64
}

fn fd_loss(case: &FdCase, head: &RewardHead) -> f64 {
    batch_gradients(head, &case.batch, &case.loss, case.mask, case.mode, case.seed, fd_scale(case))
        .unwrap()
        .0
        .total
}

/// Rectifier gates, masks and hinge activity of a forward pass. Two points
/// with equal signatures lie in the same smooth piece of the loss. Returns
/// `None` when a hinge argument or a top-k boundary is within the kink band.
fn kink_signature(case: &FdCase, head: &RewardHead) -> Option<Vec<bool>> {
    let b = &case.batch;
    let seeds = head_seeds(case.seed);
    let p = &head.params;
    let (l, td) = p.dimension.forward_batch(b.h_q.view(), case.mode, seeds[0]).unwrap();
    let h_r = concatenate(Axis(0), &[b.h_a.view(), b.h_b.view()]).unwrap();
    let (s, ts) = p.scoring.forward_batch(h_r.view(), case.mode, seeds[1]).unwrap();
    let (u, tw) = p.weighting.forward_batch(b.h_q.view(), case.mode, seeds[2]).unwrap();
    let mut sig = Vec::new();
    for tape in [&td, &ts, &tw] {
        for g in tape.gates() {
            sig.extend(g.iter().map(|&x| x > 0.0));
        }
    }
    let n = b.len();
    let margin = case.loss.margin;
    let hinge = |delta: f64, y: Verdict, sig: &mut Vec<bool>| -> Option<()> {
        if !y.is_tie() {
            let arg = margin - y.sign() * delta;
            if arg.abs() < KINK_BAND {
                return None;
            }
            sig.push(arg > 0.0);
        }
        Some(())
    };
    for (i, labels) in b.labels.iter().enumerate() {
        let li = l.row(i).to_vec();
        let mask = match case.mask {
            TrainMask::Given => labels.z.clone(),
            TrainMask::Predicted => {
                let probs: Vec<f64> = li.iter().map(|&x| logistic(x)).collect();
                let mut sorted = probs.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                let kk = head.config.top_k;
                if kk < sorted.len() && sorted[kk - 1] - sorted[kk] < KINK_BAND {
                    return None;
                }
                topk_mask(&probs, kk).unwrap()
            }
        };
        sig.extend(&mask);
        let ui = u.row(i).to_vec();
        let a = HeadOutputs::assemble(li.clone(), mask.clone(), s.row(i).to_vec(), ui.clone()).unwrap();
        let bo = HeadOutputs::assemble(li, mask, s.row(n + i).to_vec(), ui).unwrap();
        for kdim in (0..labels.z.len()).filter(|&j| labels.z[j]) {
            hinge(a.scores[kdim] - bo.scores[kdim], labels.p[kdim], &mut sig)?;
        }
        hinge(a.reward - bo.reward, labels.o, &mut sig)?;
    }
    Some(sig)
}

fn perturbed(head: &RewardHead, stack: usize, layer: usize, r: usize, c: usize, delta: f64) -> RewardHead {
    let mut h = head.clone();
    h.params.stacks_mut()[stack].layers_mut()[layer].weight_mut()[[r, c]] += delta;
    h
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let per_config = 12;
    let mut checked = [0usize; 3];
    let mut skipped = 0usize;
    let mut worst = 0.0f64;
    for cfg in 0..20 {
        // A configuration whose base point sits on a top-k boundary has no
        // smooth neighbourhood to probe; draw another.
        let case = loop {
            let c = fd_case(&mut rng);
            if kink_signature(&c, &c.head).is_some() {
                break c;
            }
        };
        let (_, grads) = batch_gradients(
            &case.head,
            &case.batch,
            &case.loss,
            case.mask,
            case.mode,
            case.seed,
            fd_scale(&case),
        )
        .map_err(|e| e.to_string())?;
        let grad_stacks = grads.stacks();
        for stack in 0..3 {
            let layers = case.head.params.stacks()[stack].layers();
            let mut done = 0;
            let mut attempts = 0;
            while done < per_config && attempts < 200 {
                attempts += 1;
                let li = rng.random_range(0..layers.len());
                let (rows, cols) = layers[li].weight().dim();
                let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
                let plus = perturbed(&case.head, stack, li, r, c, FD_STEP);
                let minus = perturbed(&case.head, stack, li, r, c, -FD_STEP);
                let centre = kink_signature(&case, &case.head);
                let (sp, sm) = (kink_signature(&case, &plus), kink_signature(&case, &minus));
                if centre.is_none() || sp != centre || sm != centre {
                    skipped += 1;
                    continue;
                }
                let numeric = (fd_loss(&case, &plus) - fd_loss(&case, &minus)) / (2.0 * FD_STEP);
                let analytic = grad_stacks[stack][li][[r, c]];
                let denom = analytic.abs().max(numeric.abs()).max(FD_FLOOR);
                let rel = (analytic - numeric).abs() / denom;
                ensure(rel < 1e-5, || {
                    format!(
                        "config {cfg} head {stack} layer {li} [{r},{c}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}"
                    )
                })?;
                worst = worst.max(rel);
                done += 1;
            }
            checked[stack] += done;
        }
    }
    let min = *checked.iter().min().unwrap();
    ensure(min >= 200, || format!("only {checked:?} coordinates checked per head"))?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "{checked:?} coordinates per head, {skipped} kink skips, max rel err {worst:.1e}"
    ))
}

// Synthetic recovery, shared by the recovery and sweep criteria.

struct Recovery {
    head: RewardHead,
    test: PairDataset,
    elapsed: Duration,
}

const SYNTH_SEED: u64 = 7;

fn synthetic_config() -> SynthConfig {
    SynthConfig {
        n_samples: 22_000,
        d_in: 64,
        seed: SYNTH_SEED,
        ..SynthConfig::default()
    }
}

fn recovery() -> &'static Recovery {
    static CELL: OnceLock<Recovery> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let data = generate(&synthetic_config()).unwrap().dataset;
        let (train_set, test) = data.split_at(20_000);
        let head = RewardHead::init(HeadConfig::with_d_in(64), SYNTH_SEED).unwrap();
        let config = TrainConfig {
            seed: SYNTH_SEED,
            ..TrainConfig::default()
        };
        let outcome = train(head, &train_set, None, &config, |_| {}).unwrap();
        Recovery {
            head: outcome.final_head,
            test,
            elapsed: start.elapsed(),
        }
    })
}

fn synthetic_recovery() -> Outcome {
    let rec = recovery();
    let report = evaluate(&rec.head, &rec.test, 3).map_err(|e| e.to_string())?;
    let again = generate(&synthetic_config()).map_err(|e| e.to_string())?.dataset;
    let (_, test_again) = again.split_at(20_000);
    ensure(test_again.records == rec.test.records && test_again.labels == rec.test.labels, || {
        "regenerated data differs for the same seed".into()
    })?;
    ensure(report.overall_accuracy >= 0.90, || {
        format!("accuracy {:.4} < 0.90", report.overall_accuracy)
    })?;
    ensure(report.mean_jaccard >= 0.80, || format!("jaccard {:.4} < 0.80", report.mean_jaccard))?;
    within(rec.elapsed, Duration::from_secs(600))?;
    Ok(format!(
        "accuracy {:.4}, jaccard {:.4}, {:.0?} for data and training",
        report.overall_accuracy, report.mean_jaccard, rec.elapsed
    ))
}

fn topk_sweep_property() -> Outcome {
    let rec = recovery();
    let k3 = evaluate(&rec.head, &rec.test, 3).map_err(|e| e.to_string())?;
    let k21 = evaluate(&rec.head, &rec.test, 21).map_err(|e| e.to_string())?;
    ensure(k3.overall_accuracy >= k21.overall_accuracy - 0.02, || {
        format!("k=3 {:.4} below k=21 {:.4} - 0.02", k3.overall_accuracy, k21.overall_accuracy)
    })?;
    let top = score_pairs(&rec.head, &rec.test.records, EvalMask::TopK(21)).map_err(|e| e.to_string())?;
    let ones = score_pairs(&rec.head, &rec.test.records, EvalMask::AllOnes).map_err(|e| e.to_string())?;
    let same_bits = top.iter().zip(&ones).all(|(x, y)| {
        x.a.reward.to_bits() == y.a.reward.to_bits()
            && x.b.reward.to_bits() == y.b.reward.to_bits()
            && x.a.weights.iter().zip(&y.a.weights).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    ensure(top.len() == ones.len() && same_bits, || "k=21 differs from the all-ones mask".into())?;
    Ok(format!(
        "k=3 {:.4} vs k=21 {:.4}, k=21 bitwise equal to all-ones",
        k3.overall_accuracy, k21.overall_accuracy
    ))
}

// Consensus filtering against an independent implementation.

fn random_top3(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = Vec::with_capacity(3);
    while v.len() < 3 {
        let d = rng.random_range(0..21);
        if !v.contains(&d) {
            v.push(d);
        }
    }
    v
}

fn shuffled(mut v: Vec<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
    v
}

fn random_sample(id: u64, rng: &mut ChaCha8Rng) -> (Vec<JudgeAnnotation>, GroundTruth) {
    let judges = rng.random_range(2..=4);
    let base = random_top3(rng);
    let base_overall = if rng.random_bool(0.8) { Verdict::PreferA } else { random_verdict(rng) };
    let source = if rng.random_bool(0.5) { "ai" } else { "human" };
    let anns = (0..judges)
        .map(|j| {
            let top3 = if rng.random_bool(0.8) {
                shuffled(base.clone(), rng)
            } else {
                random_top3(rng)
            };
            let per_dim = top3.iter().map(|&k| (k, random_verdict(rng))).collect();
            let overall = if rng.random_bool(0.85) { base_overall } else { random_verdict(rng) };
            JudgeAnnotation {
                sample_id: id,
                judge_id: format!("judge-{j}"),
                top3,
                per_dim,
                overall,
                source: Some(source.into()),
            }
        })
        .collect();
    let gt = GroundTruth {
        sample_id: id,
        chosen_is_a: rng.random_bool(0.85),
    };
    (anns, gt)
}

type Consolidated = (Vec<usize>, Vec<(usize, i64)>, i64);

/// Direct transcription of the two filtering rules on plain integers.
fn brute_force(anns: &[JudgeAnnotation], gt: &GroundTruth) -> Option<Consolidated> {
    let sorted = |a: &JudgeAnnotation| {
        let mut t = a.top3.clone();
        t.sort_unstable();
        t
    };
    let first = sorted(&anns[0]);
    if anns.iter().any(|a| sorted(a) != first) {
        return None;
    }
    let o = i64::from(anns[0].overall);
    if anns.iter().any(|a| i64::from(a.overall) != o) {
        return None;
    }
    if o != if gt.chosen_is_a { 1 } else { -1 } {
        return None;
    }
    let p = first
        .iter()
        .map(|&k| {
            let votes: Vec<i64> = anns.iter().map(|a| i64::from(a.per_dim[&k])).collect();
            let count = |v: i64| votes.iter().filter(|&&x| x == v).count();
            let best = [-1, 0, 1].into_iter().map(count).max().unwrap();
            let leaders: Vec<i64> = [-1, 0, 1].into_iter().filter(|&v| count(v) == best).collect();
            (k, if leaders.len() == 1 { leaders[0] } else { 0 })
        })
        .collect();
    Some((first, p, o))
}

fn write_jsonl<T: serde::Serialize>(path: &std::path::Path, items: &[T]) {
    let text: String = items
        .iter()
        .map(|x| serde_json::to_string(x).unwrap() + "\n")
        .collect();
    std::fs::write(path, text).unwrap();
}

fn consensus_pipeline() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (files, per_file) = (20u64, 500u64);
    let mut mismatches = 0usize;
    let mut retained_total = 0usize;
    for f in 0..files {
        let mut anns = Vec::new();
        let mut gts = Vec::new();
        let mut expected = BTreeMap::new();
        for i in 0..per_file {
            let (a, g) = random_sample(f * per_file + i, &mut rng);
            if let Some(c) = brute_force(&a, &g) {
                expected.insert(g.sample_id, c);
            }
            anns.extend(a);
            gts.push(g);
        }
        // Judge order in the file should not matter.
        use rand::seq::SliceRandom;
        anns.shuffle(&mut rng);
        let ann_path = dir.path().join(format!("judges-{f}.jsonl"));
        let gt_path = dir.path().join(format!("truth-{f}.jsonl"));
        write_jsonl(&ann_path, &anns);
        write_jsonl(&gt_path, &gts);
        let (labels, report) = run_pipeline(
            &read_annotations(&ann_path).map_err(|e| e.to_string())?,
            &read_ground_truth(&gt_path).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        ensure(report.input_count == per_file, || "input count mismatch".into())?;
        let got: BTreeMap<u64, Consolidated> = labels
            .iter()
            .map(|l| {
                let p = l.p.iter().map(|(&k, &v)| (k, i64::from(v))).collect();
                (l.id, (l.z.clone(), p, i64::from(l.o)))
            })
            .collect();
        let ids: std::collections::BTreeSet<u64> = got.keys().chain(expected.keys()).copied().collect();
        mismatches += ids.iter().filter(|id| got.get(id) != expected.get(id)).count();
        retained_total += expected.len();
    }
    ensure(mismatches == 0, || format!("{mismatches} samples disagree with the reference"))?;

    let r = FilterReport::from_aggregates(414_200, 414_132, 321_300, [2_177, 37_252, 108_259, 266_444])
        .map_err(|e| e.to_string())?;
    let text = r.render();
    ensure(text.contains("retention 77.6%"), || format!("report reads:\n{text}"))?;
    ensure(format_percent(r.retained_count, r.input_count) == "77.6%", || "retention rounding".into())?;
    let pct = r.histogram_percentages();
    ensure(pct == ["0.5%", "9.0%", "26.1%", "64.3%"], || format!("histogram {pct:?}"))?;
    for p in &pct {
        ensure(text.contains(p.as_str()), || format!("report lacks {p}"))?;
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "{} samples, {retained_total} retained, 0 mismatches; retention 77.6%, histogram 64.3/26.1/9.0/0.5",
        files * per_file
    ))
}

// Metric semantics.

fn grid_reward(rng: &mut ChaCha8Rng) -> f64 {
    (rng.random_range(0..1024) as f64 + 1.0) / 1025.0
}

fn random_verdicts(rng: &mut ChaCha8Rng) -> Vec<PairVerdict> {
    let groups = rng.random_range(1..=20);
    let per_group = rng.random_range(1..=6);
    let mut out = Vec::new();
    for g in 0..groups {
        for _ in 0..per_group {
            out.push(PairVerdict {
                id: out.len() as u64,
                reward_chosen: grid_reward(rng),
                reward_rejected: grid_reward(rng),
                category: Some(["A", "B", "C"][rng.random_range(0..3)].into()),
                group: Some(format!("g{g}")),
            });
        }
    }
    out
}

/// A random strictly increasing map on (0, 1), steep enough that distinct
/// grid values stay distinct.
fn monotone_map(rng: &mut ChaCha8Rng) -> Box<dyn Fn(f64) -> f64> {
    let a = rng.random_range(0.5..20.0);
    let b = rng.random_range(-5.0..5.0);
    let c = rng.random_range(0.5..8.0);
    let p = rng.random_range(0.5..4.0);
    match rng.random_range(0..6) {
        0 => Box::new(move |x| a * x + b),
        1 => Box::new(move |x| (c * x).exp()),
        2 => Box::new(|x: f64| x.ln()),
        3 => Box::new(move |x: f64| x.powf(p)),
        4 => Box::new(|x: f64| (x / (1.0 - x)).ln()),
        _ => Box::new(move |x: f64| (c * (x - 0.5)).tanh() * a + b),
    }
}

type MetricBits = (u64, Vec<(String, u64)>, u64, u64);

fn metric_bits(v: &[PairVerdict]) -> Result<MetricBits, String> {
    let e = |e: mdr_core::MdrError| e.to_string();
    Ok((
        overall_accuracy(v).map_err(e)?.to_bits(),
        per_category_accuracy(v)
            .map_err(e)?
            .into_iter()
            .map(|(c, a)| (c, a.to_bits()))
            .collect(),
        macro_accuracy(v).map_err(e)?.to_bits(),
        acc_plus(v).map_err(e)?.to_bits(),
    ))
}

fn metric_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid: Vec<f64> = (1..=1024).map(|i| i as f64 / 1025.0).collect();
    for trial in 0..2_000 {
        let v = random_verdicts(&mut rng);
        let overall = overall_accuracy(&v).map_err(|e| e.to_string())?;
        let plus = acc_plus(&v).map_err(|e| e.to_string())?;
        ensure(plus <= overall, || format!("trial {trial}: acc+ {plus} > overall {overall}"))?;
    }

    let pv = |id, chosen: f64, rejected: f64, cat: &str| PairVerdict {
        id,
        reward_chosen: chosen,
        reward_rejected: rejected,
        category: Some(cat.into()),
        group: None,
    };
    let example = [pv(0, 0.9, 0.1, "x"), pv(1, 0.8, 0.2, "x"), pv(2, 0.7, 0.3, "y"), pv(3, 0.2, 0.6, "y")];
    let m = macro_accuracy(&example).map_err(|e| e.to_string())?;
    ensure(m == 0.75, || format!("macro of {{1.0, 0.5}} = {m}"))?;

    let mut maps_checked = 0;
    for trial in 0..50 {
        let v = random_verdicts(&mut rng);
        let reference = metric_bits(&v)?;
        for _ in 0..10 {
            let f = monotone_map(&mut rng);
            let images: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
            ensure(images.windows(2).all(|w| w[0] < w[1]), || "map is not strictly increasing".into())?;
            let mapped: Vec<PairVerdict> = v
                .iter()
                .map(|p| PairVerdict {
                    reward_chosen: f(p.reward_chosen),
                    reward_rejected: f(p.reward_rejected),
                    ..p.clone()
                })
                .collect();
            ensure(metric_bits(&mapped)? == reference, || {
                format!("trial {trial}: metrics changed under a monotone map")
            })?;
            maps_checked += 1;
        }
    }
    Ok(format!("acc+ <= overall on 2000 draws, macro 0.75, {maps_checked} monotone maps bit-identical"))
}

// Determinism and round trips.

fn small_run() -> Result<Vec<u8>, String> {
    let data = generate(&SynthConfig {
        n_samples: 1_024,
        d_in: 16,
        seed: 3,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?
    .dataset;
    let config = HeadConfig {
        dim_widths: vec![64, 32, 21],
        score_widths: vec![96, 48, 21],
        weight_widths: vec![48, 21],
        ..HeadConfig::with_d_in(16)
    };
    let head = RewardHead::init(config.clone(), 3).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train(head, &data, None, &tc, |_| {}).map_err(|e| e.to_string())?;
    let meta = CheckpointMeta {
        step: out.steps.len() as u64,
        epoch: tc.epochs,
        ..CheckpointMeta::new(config, Some(3))
    };
    encode_checkpoint(&out.final_head, &meta).map_err(|e| e.to_string())
}

fn determinism_round_trips() -> Outcome {
    let first = small_run()?;
    let second = small_run()?;
    ensure(first == second, || "same-seed checkpoints differ".into())?;

    let (head, meta) = decode_checkpoint(&first).map_err(|e| e.to_string())?;
    let again = encode_checkpoint(&head, &meta).map_err(|e| e.to_string())?;
    ensure(again == first, || "checkpoint re-encode differs".into())?;

    let data = generate(&SynthConfig {
        n_samples: 300,
        d_in: 24,
        seed: 8,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?
    .dataset;
    let bytes = encode_embeddings(&data.records).map_err(|e| e.to_string())?;
    let decoded = decode_embeddings(&bytes).map_err(|e| e.to_string())?;
    ensure(decoded == data.records, || "embedding decode differs".into())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("pairs.mdre");
    write_embeddings(&data.records, &path).map_err(|e| e.to_string())?;
    let read = read_embeddings(&path).map_err(|e| e.to_string())?;
    let bits = |r: &[mdr_core::EmbeddingPairRecord]| -> Vec<u32> {
        r.iter()
            .flat_map(|x| x.h_q.iter().chain(&x.h_a).chain(&x.h_b).map(|v| v.to_bits()))
            .collect()
    };
    ensure(bits(&read) == bits(&data.records) && read == data.records, || {
        "embedding file round trip differs".into()
    })?;
    Ok(format!("checkpoint {} bytes identical across runs, MDRE and MDRW lossless", first.len()))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("parameter counts", parameter_counts),
        ("masked aggregation invariants", masked_aggregation),
        ("loss unit values", loss_unit_values),
        ("gradient fidelity", gradient_fidelity),
        ("synthetic recovery", synthetic_recovery),
        ("top-k sweep", topk_sweep_property),
        ("consensus pipeline", consensus_pipeline),
        ("metric semantics", metric_semantics),
        ("determinism and round trips", determinism_round_trips),
    ];
    // `cargo test -- <filter>` runs the matching criteria only.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut unexpected = 0;
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                match UNATTAINABLE.iter().find(|(n, _)| *n == name) {
                    Some((_, why)) => println!("FAIL  {name}: {detail} (unattainable: {why}) [{secs:.1}s]"),
                    None => {
                        unexpected += 1;
                        println!("FAIL  {name}: {detail} [{secs:.1}s]");
                    }
                }
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed ({} unattainable)",
        ran - failed,
        failed - unexpected
    );
    if unexpected > 0 {
        std::process::exit(1);
    }
}
