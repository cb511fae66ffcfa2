//! On-disk formats for embedding pairs, candidate sets and preference labels.
//!
//! Embedding containers (all integers little-endian):
//!
//! ```text
//! MDRE: "MDRE" | u32 version=1 | u32 d_in | u64 count
//!       then per record: u64 id | h_q | h_a | h_b     (d_in f32 each)
//! MDRC: "MDRC" | u32 version=1 | u32 d_in | u32 n_candidates | u64 count
//!       then per prompt: u64 prompt_id | h_q | n_candidates x h_r
//! ```
//!
//! Labels are line-delimited JSON, one object per sample.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{MdrError, Result};
use crate::objectives::DenseLabels;
use crate::taxonomy::NUM_DIMENSIONS;
use crate::verdict::Verdict;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MDRE";
pub const CANDIDATE_MAGIC: &[u8; 4] = b"MDRC";
pub const FORMAT_VERSION: u32 = 1;
pub const EMBEDDING_HEADER_LEN: usize = 20;
pub const CANDIDATE_HEADER_LEN: usize = 24;

/// One pair sample: instruction embedding and the two response embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPairRecord {
    pub id: u64,
    pub h_q: Vec<f32>,
    pub h_a: Vec<f32>,
    pub h_b: Vec<f32>,
}

impl EmbeddingPairRecord {
    pub fn d_in(&self) -> usize {
        self.h_q.len()
    }
}

/// A prompt with several candidate responses, used for best-of-N pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub prompt_id: u64,
    pub h_q: Vec<f32>,
    pub responses: Vec<Vec<f32>>,
}

pub fn promote(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Stacks the rows selected by `idx` into a `(idx.len(), d)` matrix.
pub fn gather_rows<'a, F>(idx: &[usize], d: usize, row: F) -> Array2<f64>
where
    F: Fn(usize) -> &'a [f32],
{
    let mut out = Array2::zeros((idx.len(), d));
    for (r, &i) in idx.iter().enumerate() {
        for (o, &v) in out.row_mut(r).iter_mut().zip(row(i)) {
            *o = f64::from(v);
        }
    }
    out
}

fn check_finite(v: &[f32], id: u64) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(MdrError::NonFinite {
            context: format!("embedding of record {id}"),
        });
    }
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_embeddings(records: &[EmbeddingPairRecord]) -> Result<Vec<u8>> {
    let d_in = records.first().map_or(0, |r| r.d_in());
    let mut buf = Vec::with_capacity(EMBEDDING_HEADER_LEN + records.len() * (8 + 12 * d_in));
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(d_in as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        for v in [&r.h_q, &r.h_a, &r.h_b] {
            if v.len() != d_in {
                return Err(MdrError::shape("embedding record d_in", d_in, v.len()));
            }
        }
        buf.extend_from_slice(&r.id.to_le_bytes());
        put_f32s(&mut buf, &r.h_q);
        put_f32s(&mut buf, &r.h_a);
        put_f32s(&mut buf, &r.h_b);
    }
    Ok(buf)
}

pub fn write_embeddings(records: &[EmbeddingPairRecord], path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_embeddings(records)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Cursor over a byte buffer that reports offsets on failure.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(MdrError::Corrupt {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(MdrError::Corrupt {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(MdrError::Corrupt {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(MdrError::Corrupt {
                offset: self.pos as u64,
                message: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<EmbeddingPairRecord>> {
    let mut r = Reader::new(bytes);
    r.magic(EMBEDDING_MAGIC)?;
    let d_in = r.u32("d_in")? as usize;
    let count = r.u64("count")?;
    let record_len = 8 + 12 * d_in as u64;
    let available = (bytes.len() - r.pos) as u64;
    if count.saturating_mul(record_len) > available {
        return Err(MdrError::Corrupt {
            offset: r.pos as u64,
            message: format!(
                "truncated payload: header declares {count} records of {record_len} bytes, {available} bytes present"
            ),
        });
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id = r.u64("record id")?;
        let h_q = r.f32s(d_in, "h_q")?;
        let h_a = r.f32s(d_in, "h_a")?;
        let h_b = r.f32s(d_in, "h_b")?;
        for v in [&h_q, &h_a, &h_b] {
            check_finite(v, id)?;
        }
        records.push(EmbeddingPairRecord { id, h_q, h_a, h_b });
    }
    r.finish()?;
    Ok(records)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingPairRecord>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_embeddings(&bytes)
}

/// Reads an embedding file and checks its width against `d_in`.
pub fn read_embeddings_for(path: impl AsRef<Path>, d_in: usize) -> Result<Vec<EmbeddingPairRecord>> {
    let records = read_embeddings(path)?;
    if let Some(r) = records.first() {
        if r.d_in() != d_in {
            return Err(MdrError::shape("embedding width (d_in)", d_in, r.d_in()));
        }
    }
    Ok(records)
}

pub fn encode_candidates(sets: &[CandidateSet]) -> Result<Vec<u8>> {
    let d_in = sets.first().map_or(0, |s| s.h_q.len());
    let n = sets.first().map_or(0, |s| s.responses.len());
    let mut buf = Vec::new();
    buf.extend_from_slice(CANDIDATE_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(d_in as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(sets.len() as u64).to_le_bytes());
    for s in sets {
        if s.responses.len() != n {
            return Err(MdrError::shape("candidate count", n, s.responses.len()));
        }
        buf.extend_from_slice(&s.prompt_id.to_le_bytes());
        if s.h_q.len() != d_in {
            return Err(MdrError::shape("candidate d_in", d_in, s.h_q.len()));
        }
        put_f32s(&mut buf, &s.h_q);
        for resp in &s.responses {
            if resp.len() != d_in {
                return Err(MdrError::shape("candidate d_in", d_in, resp.len()));
            }
            put_f32s(&mut buf, resp);
        }
    }
    Ok(buf)
}

pub fn write_candidates(sets: &[CandidateSet], path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_candidates(sets)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn decode_candidates(bytes: &[u8]) -> Result<Vec<CandidateSet>> {
    let mut r = Reader::new(bytes);
    r.magic(CANDIDATE_MAGIC)?;
    let d_in = r.u32("d_in")? as usize;
    let n = r.u32("n_candidates")? as usize;
    let count = r.u64("count")?;
    let mut sets = Vec::new();
    for _ in 0..count {
        let prompt_id = r.u64("prompt id")?;
        let h_q = r.f32s(d_in, "h_q")?;
        check_finite(&h_q, prompt_id)?;
        let mut responses = Vec::with_capacity(n);
        for _ in 0..n {
            let resp = r.f32s(d_in, "candidate response")?;
            check_finite(&resp, prompt_id)?;
            responses.push(resp);
        }
        sets.push(CandidateSet {
            prompt_id,
            h_q,
            responses,
        });
    }
    r.finish()?;
    Ok(sets)
}

pub fn read_candidates(path: impl AsRef<Path>) -> Result<Vec<CandidateSet>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_candidates(&bytes)
}

/// Supervision for one pair sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceLabels {
    pub id: u64,
    /// Relevant dimension ids, ascending.
    pub z: Vec<usize>,
    /// Per-dimension verdicts, keys a subset of `z`.
    pub p: BTreeMap<usize, Verdict>,
    pub o: Verdict,
    pub category: Option<String>,
    pub group: Option<String>,
    /// Fields this library does not interpret, kept for rewriting.
    pub extra: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct RawLabels {
    id: u64,
    z: Vec<usize>,
    #[serde(default)]
    p: BTreeMap<String, i64>,
    o: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<String>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

impl PreferenceLabels {
    pub fn new(id: u64, z: Vec<usize>, p: BTreeMap<usize, Verdict>, o: Verdict) -> Self {
        Self {
            id,
            z,
            p,
            o,
            category: None,
            group: None,
            extra: Map::new(),
        }
    }

    pub fn validate(&self, num_dims: usize) -> Result<()> {
        if self.z.is_empty() {
            return Err(MdrError::Validation(format!("sample {}: z is empty", self.id)));
        }
        let mut seen = HashSet::new();
        for &k in &self.z {
            if k >= num_dims {
                return Err(MdrError::Validation(format!(
                    "sample {}: dimension {k} out of range 0..{num_dims}",
                    self.id
                )));
            }
            if !seen.insert(k) {
                return Err(MdrError::Validation(format!(
                    "sample {}: dimension {k} repeated in z",
                    self.id
                )));
            }
        }
        if let Some(k) = self.p.keys().find(|k| !seen.contains(k)) {
            return Err(MdrError::Validation(format!(
                "sample {}: preference given for dimension {k}, which is not in z",
                self.id
            )));
        }
        Ok(())
    }

    pub fn relevance_mask(&self, num_dims: usize) -> Vec<bool> {
        let mut z = vec![false; num_dims];
        for &k in &self.z {
            z[k] = true;
        }
        z
    }

    /// Dense form; relevant dimensions without an explicit verdict are ties.
    pub fn to_dense(&self, num_dims: usize) -> DenseLabels {
        let mut p = vec![Verdict::Tie; num_dims];
        for (&k, &v) in &self.p {
            p[k] = v;
        }
        DenseLabels {
            z: self.relevance_mask(num_dims),
            p,
            o: self.o,
        }
    }

    fn from_raw(raw: RawLabels) -> Result<Self> {
        let mut p = BTreeMap::new();
        for (key, value) in raw.p {
            let k: usize = key.parse().map_err(|_| {
                MdrError::Validation(format!("sample {}: bad dimension key {key:?}", raw.id))
            })?;
            p.insert(k, Verdict::try_from(value)?);
        }
        let mut z = raw.z;
        z.sort_unstable();
        Ok(Self {
            id: raw.id,
            z,
            p,
            o: Verdict::try_from(raw.o)?,
            category: raw.category,
            group: raw.group,
            extra: raw.extra,
        })
    }

    fn to_raw(&self) -> RawLabels {
        RawLabels {
            id: self.id,
            z: self.z.clone(),
            p: self.p.iter().map(|(k, v)| (k.to_string(), i64::from(*v))).collect(),
            o: i64::from(self.o),
            category: self.category.clone(),
            group: self.group.clone(),
            extra: self.extra.clone(),
        }
    }

    pub fn from_json_line(line: &str, num_dims: usize) -> Result<Self> {
        let raw: RawLabels = serde_json::from_str(line)?;
        let labels = Self::from_raw(raw)?;
        labels.validate(num_dims)?;
        Ok(labels)
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_raw())?)
    }
}

pub fn parse_labels(text: impl BufRead, num_dims: usize) -> Result<Vec<PreferenceLabels>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let labels = PreferenceLabels::from_json_line(&line, num_dims).map_err(|e| match e {
            MdrError::Json(j) => MdrError::Validation(format!("line {}: {j}", lineno + 1)),
            other => other,
        })?;
        if !ids.insert(labels.id) {
            return Err(MdrError::Validation(format!(
                "line {}: duplicate sample id {}",
                lineno + 1,
                labels.id
            )));
        }
        out.push(labels);
    }
    Ok(out)
}

pub fn read_labels(path: impl AsRef<Path>, num_dims: usize) -> Result<Vec<PreferenceLabels>> {
    parse_labels(BufReader::new(File::open(path)?), num_dims)
}

pub fn write_labels(records: &[PreferenceLabels], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(w, "{}", r.to_json_line()?)?;
    }
    w.flush()?;
    Ok(())
}

/// Embeddings joined with their labels by id, in embedding order.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub records: Vec<EmbeddingPairRecord>,
    pub labels: Vec<PreferenceLabels>,
}

impl PairDataset {
    pub fn join(records: Vec<EmbeddingPairRecord>, labels: Vec<PreferenceLabels>) -> Result<Self> {
        let mut by_id: std::collections::HashMap<u64, PreferenceLabels> =
            labels.into_iter().map(|l| (l.id, l)).collect();
        let mut joined = Vec::with_capacity(records.len());
        for r in &records {
            let l = by_id.remove(&r.id).ok_or_else(|| {
                MdrError::Validation(format!("no labels for embedding record {}", r.id))
            })?;
            joined.push(l);
        }
        Ok(Self {
            records,
            labels: joined,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.records.first().map_or(0, EmbeddingPairRecord::d_in)
    }

    /// Contiguous split: the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (PairDataset, PairDataset) {
        let n = n.min(self.len());
        (
            PairDataset {
                records: self.records[..n].to_vec(),
                labels: self.labels[..n].to_vec(),
            },
            PairDataset {
                records: self.records[n..].to_vec(),
                labels: self.labels[n..].to_vec(),
            },
        )
    }
}

/// Dimension count used when a caller does not specify one.
pub const DEFAULT_NUM_DIMS: usize = NUM_DIMENSIONS;

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: u64, d: usize) -> EmbeddingPairRecord {
        let f = |o: f32| (0..d).map(|i| i as f32 * 0.5 + o + id as f32).collect();
        EmbeddingPairRecord {
            id,
            h_q: f(0.1),
            h_a: f(-1.0),
            h_b: f(3.25),
        }
    }

    #[test]
    fn embedding_round_trip() {
        let records: Vec<_> = (0..5).map(|i| record(i * 7, 9)).collect();
        let bytes = encode_embeddings(&records).unwrap();
        assert_eq!(bytes.len(), EMBEDDING_HEADER_LEN + 5 * (8 + 3 * 4 * 9));
        assert_eq!(decode_embeddings(&bytes).unwrap(), records);
    }

    #[test]
    fn empty_file_is_header_only() {
        let bytes = encode_embeddings(&[]).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"MDRE");
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 0);
        assert!(decode_embeddings(&bytes).unwrap().is_empty());
    }

    #[test]
    fn truncation_and_bad_headers() {
        let records: Vec<_> = (0..3).map(|i| record(i, 4)).collect();
        let bytes = encode_embeddings(&records).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        match decode_embeddings(cut) {
            Err(MdrError::Corrupt { offset, message }) => {
                assert_eq!(offset, 20);
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_embeddings(&bad), Err(MdrError::Corrupt { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_embeddings(&bad), Err(MdrError::Corrupt { offset: 4, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_embeddings(&extra).is_err());
    }

    #[test]
    fn mixed_widths_rejected_on_write() {
        let mut r = record(1, 4);
        r.h_b.pop();
        assert!(encode_embeddings(&[record(0, 4), r]).is_err());
    }

    #[test]
    fn candidate_round_trip() {
        let sets: Vec<_> = (0..3)
            .map(|p| CandidateSet {
                prompt_id: p,
                h_q: vec![p as f32; 5],
                responses: (0..6).map(|c| vec![c as f32 - p as f32; 5]).collect(),
            })
            .collect();
        let bytes = encode_candidates(&sets).unwrap();
        assert_eq!(bytes.len(), CANDIDATE_HEADER_LEN + 3 * (8 + 7 * 5 * 4));
        assert_eq!(decode_candidates(&bytes).unwrap(), sets);
    }

    #[test]
    fn label_examples() {
        let ok = PreferenceLabels::from_json_line(
            r#"{"id":1,"z":[7,9,14],"p":{"7":1,"9":0,"14":1},"o":1}"#,
            21,
        )
        .unwrap();
        assert_eq!(ok.z, vec![7, 9, 14]);
        assert_eq!(ok.p[&9], Verdict::Tie);
        assert_eq!(ok.o, Verdict::PreferA);

        let bad_key = PreferenceLabels::from_json_line(
            r#"{"id":1,"z":[7,9,14],"p":{"3":1},"o":1}"#,
            21,
        );
        assert!(matches!(bad_key, Err(MdrError::Validation(_))));

        let bad_o = PreferenceLabels::from_json_line(r#"{"id":1,"z":[7],"p":{},"o":2}"#, 21);
        assert!(matches!(bad_o, Err(MdrError::InvalidVerdict(2))));

        let bad_dim = PreferenceLabels::from_json_line(r#"{"id":1,"z":[21],"o":1}"#, 21);
        assert!(bad_dim.is_err());
        let empty_z = PreferenceLabels::from_json_line(r#"{"id":1,"z":[],"o":1}"#, 21);
        assert!(empty_z.is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = "{\"id\":1,\"z\":[0],\"o\":1}\n{\"id\":1,\"z\":[2],\"o\":0}\n";
        assert!(matches!(parse_labels(text.as_bytes(), 21), Err(MdrError::Validation(_))));
    }

    #[test]
    fn unknown_fields_survive_rewrite() {
        let line = r#"{"id":4,"z":[1,2],"p":{"2":-1},"o":-1,"category":"reasoning","source":"rlaif","score":0.5}"#;
        let labels = PreferenceLabels::from_json_line(line, 21).unwrap();
        assert_eq!(labels.extra["source"], "rlaif");
        let again = PreferenceLabels::from_json_line(&labels.to_json_line().unwrap(), 21).unwrap();
        assert_eq!(again, labels);
        assert_eq!(again.category.as_deref(), Some("reasoning"));
    }

    #[test]
    fn dense_conversion() {
        let labels = PreferenceLabels::from_json_line(r#"{"id":1,"z":[0,3],"p":{"3":-1},"o":1}"#, 5).unwrap();
        let dense = labels.to_dense(5);
        assert_eq!(dense.z, vec![true, false, false, true, false]);
        assert_eq!(dense.p[3], Verdict::PreferB);
        assert_eq!(dense.p[0], Verdict::Tie);
    }

    #[test]
    fn join_requires_labels_for_every_record() {
        let records = vec![record(1, 2), record(2, 2)];
        let labels = vec![PreferenceLabels::new(2, vec![0], BTreeMap::new(), Verdict::Tie)];
        assert!(PairDataset::join(records.clone(), labels.clone()).is_err());
        let mut all = labels;
        all.push(PreferenceLabels::new(1, vec![1], BTreeMap::new(), Verdict::PreferA));
        let ds = PairDataset::join(records, all).unwrap();
        assert_eq!(ds.labels[0].id, 1);
    }
}
