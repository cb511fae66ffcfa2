//! Multi-judge consensus filtering of preference annotations.
//!
//! Every sample is annotated by several judges. A sample survives when all
//! judges pick the same set of three relevant dimensions, all give the same
//! overall verdict, and that verdict agrees with the dataset's original
//! chosen response.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::PreferenceLabels;
use crate::error::{MdrError, Result};
use crate::taxonomy::NUM_DIMENSIONS;
use crate::verdict::Verdict;

/// Template for asking a judge for the three most relevant dimensions.
pub const DIMENSION_PROMPT: &str = include_str!("../assets/prompts/dimension_prediction.txt");
/// Template for the per-dimension comparison and overall verdict.
pub const COMPARISON_PROMPT: &str = include_str!("../assets/prompts/response_comparison.txt");

pub const TOP3_RULE: &str = "set-equality";
pub const CONSOLIDATION_RULE: &str = "majority";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeAnnotation {
    pub sample_id: u64,
    pub judge_id: String,
    pub top3: Vec<usize>,
    pub per_dim: BTreeMap<usize, Verdict>,
    pub overall: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl JudgeAnnotation {
    pub fn validate(&self) -> Result<()> {
        let set: BTreeSet<usize> = self.top3.iter().copied().collect();
        if self.top3.len() != 3 || set.len() != 3 {
            return Err(MdrError::Validation(format!(
                "sample {} judge {}: top3 must name 3 distinct dimensions",
                self.sample_id, self.judge_id
            )));
        }
        if let Some(&k) = set.iter().find(|&&k| k >= NUM_DIMENSIONS) {
            return Err(MdrError::InvalidDimension(k));
        }
        if !self.per_dim.keys().copied().eq(set.iter().copied()) {
            return Err(MdrError::Validation(format!(
                "sample {} judge {}: per_dim keys must equal top3",
                self.sample_id, self.judge_id
            )));
        }
        Ok(())
    }

    pub fn top3_set(&self) -> BTreeSet<usize> {
        self.top3.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub sample_id: u64,
    pub chosen_is_a: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    DimensionDisagreement,
    OverallDisagreement,
    GtMismatch,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::DimensionDisagreement => "dimension-disagreement",
            RejectReason::OverallDisagreement => "overall-disagreement",
            RejectReason::GtMismatch => "gt-mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Retained {
        z: Vec<usize>,
        p: BTreeMap<usize, Verdict>,
        o: Verdict,
    },
    Rejected(RejectReason),
}

/// Most frequent verdict; any tie for the top count yields `Tie`.
pub fn majority(votes: impl IntoIterator<Item = Verdict>) -> Verdict {
    let mut counts = [0usize; 3];
    for v in votes {
        counts[(i64::from(v) + 1) as usize] += 1;
    }
    let max = *counts.iter().max().unwrap();
    let winners: Vec<usize> = (0..3).filter(|&i| counts[i] == max).collect();
    match winners[..] {
        [i] => Verdict::try_from(i as i64 - 1).unwrap(),
        _ => Verdict::Tie,
    }
}

fn check_group(anns: &[JudgeAnnotation]) -> Result<()> {
    if anns.len() < 2 {
        return Err(MdrError::Validation(format!(
            "sample {}: need at least 2 judges, got {}",
            anns.first().map_or(0, |a| a.sample_id),
            anns.len()
        )));
    }
    let id = anns[0].sample_id;
    let mut judges = BTreeSet::new();
    for a in anns {
        if a.sample_id != id {
            return Err(MdrError::Validation(format!(
                "mixed sample ids {id} and {} in one group",
                a.sample_id
            )));
        }
        if !judges.insert(a.judge_id.as_str()) {
            return Err(MdrError::Validation(format!(
                "sample {id}: judge {} appears twice",
                a.judge_id
            )));
        }
        a.validate()?;
    }
    Ok(())
}

pub fn filter_sample(anns: &[JudgeAnnotation], chosen_is_a: bool) -> Result<Decision> {
    check_group(anns)?;
    let top3 = anns[0].top3_set();
    if anns.iter().any(|a| a.top3_set() != top3) {
        return Ok(Decision::Rejected(RejectReason::DimensionDisagreement));
    }
    let o = anns[0].overall;
    if anns.iter().any(|a| a.overall != o) {
        return Ok(Decision::Rejected(RejectReason::OverallDisagreement));
    }
    let expected = if chosen_is_a { Verdict::PreferA } else { Verdict::PreferB };
    if o != expected {
        return Ok(Decision::Rejected(RejectReason::GtMismatch));
    }
    let p = top3
        .iter()
        .map(|&k| (k, majority(anns.iter().map(|a| a.per_dim[&k]))))
        .collect();
    Ok(Decision::Retained {
        z: top3.into_iter().collect(),
        p,
        o,
    })
}

/// Per-sample count of dimensions whose verdict equals the overall verdict,
/// bucketed 0 through 3.
pub fn consistency_histogram<'a>(
    samples: impl IntoIterator<Item = (&'a [Verdict], Verdict)>,
) -> Result<[u64; 4]> {
    let mut h = [0u64; 4];
    for (dims, overall) in samples {
        if dims.len() != 3 {
            return Err(MdrError::shape("consistency histogram arity", 3, dims.len()));
        }
        h[dims.iter().filter(|&&v| v == overall).count()] += 1;
    }
    Ok(h)
}

/// Unordered dimension pairs that appear together in a top-3 set.
pub fn cooccurrence<'a>(sets: impl IntoIterator<Item = &'a [usize]>) -> BTreeMap<(usize, usize), u64> {
    let mut counts = BTreeMap::new();
    for set in sets {
        let s: BTreeSet<usize> = set.iter().copied().collect();
        let v: Vec<usize> = s.into_iter().collect();
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                *counts.entry((v[i], v[j])).or_insert(0) += 1;
            }
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TieRate {
    pub dimension: usize,
    pub ties: u64,
    pub count: u64,
    pub rate: f64,
}

/// Share of tie verdicts per dimension, for dimensions with any verdict.
pub fn tie_rates(verdicts: impl IntoIterator<Item = (usize, Verdict)>) -> Vec<TieRate> {
    let mut t: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for (k, v) in verdicts {
        let e = t.entry(k).or_default();
        e.0 += u64::from(v.is_tie());
        e.1 += 1;
    }
    t.into_iter()
        .map(|(dimension, (ties, count))| TieRate {
            dimension,
            ties,
            count,
            rate: ties as f64 / count as f64,
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub input: u64,
    pub dim_agreed: u64,
    pub retained: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCount {
    pub a: usize,
    pub b: usize,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: u64,
    pub dim_agreed_count: u64,
    pub retained_count: u64,
    pub retention_rate: f64,
    pub rejected: BTreeMap<String, u64>,
    /// Over dimension-agreed samples: how many of the 3 consolidated
    /// per-dimension verdicts match the majority overall verdict.
    pub consistency_histogram: [u64; 4],
    /// Over the per-dimension labels of retained samples.
    pub tie_rates: Vec<TieRate>,
    /// Over the relevant sets of retained samples, most frequent first.
    pub cooccurrence: Vec<PairCount>,
    pub per_source: BTreeMap<String, SourceCounts>,
    pub top3_rule: String,
    pub consolidation_rule: String,
}

/// `part / whole` as a percentage with one decimal, e.g. `77.6%`.
pub fn format_percent(part: u64, whole: u64) -> String {
    if whole == 0 {
        return "n/a".into();
    }
    format!("{:.1}%", 100.0 * part as f64 / whole as f64)
}

impl FilterReport {
    /// A report holding only aggregate counts.
    pub fn from_aggregates(input: u64, dim_agreed: u64, retained: u64, histogram: [u64; 4]) -> Result<Self> {
        if !(retained <= dim_agreed && dim_agreed <= input) {
            return Err(MdrError::Validation(
                "counts must satisfy retained <= dim_agreed <= input".into(),
            ));
        }
        Ok(Self {
            input_count: input,
            dim_agreed_count: dim_agreed,
            retained_count: retained,
            retention_rate: if input == 0 { 0.0 } else { retained as f64 / input as f64 },
            rejected: BTreeMap::new(),
            consistency_histogram: histogram,
            tie_rates: Vec::new(),
            cooccurrence: Vec::new(),
            per_source: BTreeMap::new(),
            top3_rule: TOP3_RULE.into(),
            consolidation_rule: CONSOLIDATION_RULE.into(),
        })
    }

    pub fn histogram_percentages(&self) -> [String; 4] {
        let total: u64 = self.consistency_histogram.iter().sum();
        self.consistency_histogram.map(|c| format_percent(c, total))
    }

    /// Human-readable summary.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input samples       {}", self.input_count);
        let _ = writeln!(
            s,
            "dimensions agreed   {} ({})",
            self.dim_agreed_count,
            format_percent(self.dim_agreed_count, self.input_count)
        );
        let _ = writeln!(
            s,
            "retained            {} (retention {})",
            self.retained_count,
            format_percent(self.retained_count, self.input_count)
        );
        for (reason, n) in &self.rejected {
            let _ = writeln!(s, "rejected {reason:<22} {n}");
        }
        let pct = self.histogram_percentages();
        for (m, (c, p)) in self.consistency_histogram.iter().zip(&pct).enumerate().rev() {
            let _ = writeln!(s, "{m} of 3 dimensions match overall  {c} ({p})");
        }
        s
    }
}

/// Applies [`filter_sample`] to every sample and gathers the statistics.
/// Output order is ascending sample id regardless of input order.
pub fn run_pipeline(
    annotations: &[JudgeAnnotation],
    ground_truth: &[GroundTruth],
) -> Result<(Vec<PreferenceLabels>, FilterReport)> {
    let mut gt = BTreeMap::new();
    for g in ground_truth {
        if gt.insert(g.sample_id, g.chosen_is_a).is_some() {
            return Err(MdrError::Validation(format!(
                "duplicate ground truth for sample {}",
                g.sample_id
            )));
        }
    }
    let mut by_sample: BTreeMap<u64, Vec<JudgeAnnotation>> = BTreeMap::new();
    for a in annotations {
        by_sample.entry(a.sample_id).or_default().push(a.clone());
    }

    let mut retained = Vec::new();
    let mut rejected: BTreeMap<String, u64> = BTreeMap::new();
    let mut histogram = [0u64; 4];
    let mut per_source: BTreeMap<String, SourceCounts> = BTreeMap::new();
    let mut dim_agreed = 0u64;
    let input = by_sample.len() as u64;
    for (id, mut anns) in by_sample {
        anns.sort_by(|a, b| a.judge_id.cmp(&b.judge_id));
        let chosen_is_a = *gt
            .get(&id)
            .ok_or_else(|| MdrError::Validation(format!("no ground truth for sample {id}")))?;
        let decision = filter_sample(&anns, chosen_is_a)?;
        let source = anns.iter().find_map(|a| a.source.clone());
        let src = source.as_ref().map(|s| per_source.entry(s.clone()).or_default());
        let agreed = decision != Decision::Rejected(RejectReason::DimensionDisagreement);
        if let Some(src) = src {
            src.input += 1;
            src.dim_agreed += u64::from(agreed);
            src.retained += u64::from(matches!(decision, Decision::Retained { .. }));
        }
        if agreed {
            dim_agreed += 1;
            let dims: Vec<usize> = anns[0].top3_set().into_iter().collect();
            let p: Vec<Verdict> = dims
                .iter()
                .map(|k| majority(anns.iter().map(|a| a.per_dim[k])))
                .collect();
            let overall = majority(anns.iter().map(|a| a.overall));
            histogram[p.iter().filter(|&&v| v == overall).count()] += 1;
        }
        match decision {
            Decision::Retained { z, p, o } => {
                let mut labels = PreferenceLabels::new(id, z, p, o);
                if let Some(s) = source {
                    labels.extra.insert("source".into(), s.into());
                }
                retained.push(labels);
            }
            Decision::Rejected(reason) => *rejected.entry(reason.as_str().into()).or_default() += 1,
        }
    }

    let mut report = FilterReport::from_aggregates(input, dim_agreed, retained.len() as u64, histogram)?;
    report.rejected = rejected;
    report.per_source = per_source;
    report.tie_rates = tie_rates(retained.iter().flat_map(|l| l.p.iter().map(|(&k, &v)| (k, v))));
    let mut pairs: Vec<PairCount> = cooccurrence(retained.iter().map(|l| l.z.as_slice()))
        .into_iter()
        .map(|((a, b), count)| PairCount { a, b, count })
        .collect();
    pairs.sort_by(|x, y| y.count.cmp(&x.count).then((x.a, x.b).cmp(&(y.a, y.b))));
    report.cooccurrence = pairs;
    Ok((retained, report))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            MdrError::Validation(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<JudgeAnnotation>> {
    read_jsonl(path.as_ref())
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruth>> {
    read_jsonl(path.as_ref())
}
