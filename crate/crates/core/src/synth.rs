//! Synthetic pair data drawn from a planted teacher.
//!
//! The teacher owns one unit relevance direction per dimension. An
//! instruction embedding is built around a few of those directions, so the
//! relevant set is recoverable from `h_q` alone. Responses live in a
//! low-dimensional latent space; the teacher scores each dimension linearly
//! in that latent and weights the relevant dimensions with a softmax over
//! scaled relevance scores. Labels come from the clean teacher, embeddings
//! are observed with additive Gaussian noise.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{CandidateSet, EmbeddingPairRecord, PairDataset, PreferenceLabels};
use crate::error::{MdrError, Result};
use crate::head::{aggregate_reward, masked_weights, topk_mask};
use crate::taxonomy::{core_of, NUM_DIMENSIONS};
use crate::verdict::Verdict;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub d_in: usize,
    pub num_dims: usize,
    pub top_k: usize,
    /// Standard deviation of the observation noise on every embedding.
    pub noise: f64,
    /// Score or reward gaps below this magnitude are labeled as ties.
    pub tie_band: f64,
    /// Width of the response latent (clamped to `d_in`).
    pub latent_dim: usize,
    /// Scale of the isotropic background in instruction embeddings.
    pub query_background: f64,
    /// Strength of the planted relevance directions in instruction embeddings.
    pub query_signal: f64,
    /// Standard deviation of the teacher score matrix entries.
    pub score_scale: f64,
    /// Teacher weight logits are this multiple of the relevance scores.
    pub weight_gain: f64,
    /// Number of consecutive samples sharing one instruction.
    pub group_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            d_in: 64,
            num_dims: NUM_DIMENSIONS,
            top_k: 3,
            noise: 0.1,
            tie_band: 0.05,
            latent_dim: 16,
            query_background: 0.3,
            query_signal: 2.0,
            score_scale: 0.25,
            weight_gain: 0.5,
            group_size: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
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
        if self.group_size == 0 || self.latent_dim == 0 {
            return Err(MdrError::InvalidConfig("group_size and latent_dim must be positive".into()));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("tie_band", self.tie_band),
            ("query_background", self.query_background),
            ("query_signal", self.query_signal),
            ("score_scale", self.score_scale),
            ("weight_gain", self.weight_gain),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(MdrError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// The planted ground truth behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub config: SynthConfig,
    /// `num_dims x d_in`, unit rows.
    pub relevance: Array2<f64>,
    /// `d_in x latent`, orthogonal columns scaled so that embedded responses
    /// have unit variance per coordinate.
    pub response_map: Array2<f64>,
    /// `num_dims x latent`.
    pub score_map: Array2<f64>,
}

/// Serializable snapshot of a [`Teacher`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherMetadata {
    pub config: SynthConfig,
    pub relevance_directions: Vec<Vec<f64>>,
    pub response_map: Vec<Vec<f64>>,
    pub score_map: Vec<Vec<f64>>,
    pub weight_rule: String,
    pub score_rule: String,
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(v: &[Vec<f64>]) -> Result<Array2<f64>> {
    let ncols = v.first().map_or(0, Vec::len);
    let flat: Vec<f64> = v.iter().flatten().copied().collect();
    Array2::from_shape_vec((v.len(), ncols), flat)
        .map_err(|_| MdrError::Validation("ragged matrix in teacher metadata".into()))
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || scale * rng.sample::<f64, _>(StandardNormal))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Gram-Schmidt on the columns of `m`.
fn orthonormal_columns(mut m: Array2<f64>) -> Array2<f64> {
    for j in 0..m.ncols() {
        for i in 0..j {
            let proj = m.column(i).dot(&m.column(j));
            let ci = m.column(i).to_owned();
            m.column_mut(j).scaled_add(-proj, &ci);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|x| x / norm);
    }
    m
}

impl Teacher {
    pub fn new(config: SynthConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (d, k) = (config.d_in, config.num_dims);
        let latent = config.latent_dim.min(d);
        let mut relevance = gaussian(rng, (k, d), 1.0);
        for mut row in relevance.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        let scale = (d as f64 / latent as f64).sqrt();
        let response_map = orthonormal_columns(gaussian(rng, (d, latent), 1.0)) * scale;
        let score_map = gaussian(rng, (k, latent), config.score_scale);
        Ok(Self {
            config,
            relevance,
            response_map,
            score_map,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.score_map.ncols()
    }

    /// Clean relevance scores `C h_q`.
    pub fn relevance_scores(&self, h_q: &Array1<f64>) -> Array1<f64> {
        self.relevance.dot(h_q)
    }

    pub fn relevant_set(&self, h_q: &Array1<f64>) -> Result<Vec<bool>> {
        topk_mask(&self.relevance_scores(h_q).to_vec(), self.config.top_k)
    }

    pub fn weight_logits(&self, h_q: &Array1<f64>) -> Array1<f64> {
        self.relevance_scores(h_q) * self.config.weight_gain
    }

    pub fn scores(&self, latent: &Array1<f64>) -> Array1<f64> {
        self.score_map.dot(latent)
    }

    pub fn embed_response(&self, latent: &Array1<f64>) -> Array1<f64> {
        self.response_map.dot(latent)
    }

    pub fn reward(&self, u: &Array1<f64>, s: &Array1<f64>, mask: &[bool]) -> Result<f64> {
        let alpha = masked_weights(u.as_slice().unwrap(), mask)?;
        aggregate_reward(&alpha, s.as_slice().unwrap())
    }

    /// Clean instruction embedding planted around `top_k` random directions.
    fn draw_query(&self, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let c = &self.config;
        let mut h = gaussian_vec(rng, c.d_in, c.query_background);
        for k in sample(rng, c.num_dims, c.top_k).into_iter() {
            let amp = 1.0 + rng.random::<f64>();
            h.scaled_add(c.query_signal * amp, &self.relevance.row(k));
        }
        h
    }

    fn observe(&self, clean: &Array1<f64>, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let noise = self.config.noise;
        clean
            .iter()
            .map(|&x| (x + noise * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect()
    }

    pub fn metadata(&self) -> TeacherMetadata {
        TeacherMetadata {
            config: self.config.clone(),
            relevance_directions: rows(&self.relevance),
            response_map: rows(&self.response_map),
            score_map: rows(&self.score_map),
            weight_rule: format!("u = {} * (C h_q)", self.config.weight_gain),
            score_rule: "s = S zeta, h_r = M zeta".into(),
        }
    }

    pub fn from_metadata(meta: &TeacherMetadata) -> Result<Self> {
        meta.config.validate()?;
        Ok(Self {
            config: meta.config.clone(),
            relevance: from_rows(&meta.relevance_directions)?,
            response_map: from_rows(&meta.response_map)?,
            score_map: from_rows(&meta.score_map)?,
        })
    }

    fn category(&self, h_q: &Array1<f64>) -> String {
        let r = self.relevance_scores(h_q);
        let top = (0..r.len()).fold(0, |best, i| if r[i] > r[best] { i } else { best });
        if self.config.num_dims == NUM_DIMENSIONS {
            core_of(top).map(|c| c.abbreviation().to_string()).unwrap_or_default()
        } else {
            format!("c{}", top % 7)
        }
    }
}

/// A generated dataset together with the teacher that labeled it.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: PairDataset,
    pub teacher: Teacher,
}

/// Draws `config.n_samples` labeled pairs. Output depends only on `config`.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let teacher = Teacher::new(config.clone(), &mut rng)?;
    let dataset = draw_pairs(&teacher, config.n_samples, 0, &mut rng)?;
    Ok(SynthOutput { dataset, teacher })
}

/// Training pairs plus optional held-out pairs and candidate sets, all from
/// one teacher and one seeded stream.
#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub teacher: Teacher,
    pub train: PairDataset,
    pub holdout: Option<PairDataset>,
    pub candidates: Option<(Vec<CandidateSet>, Vec<Vec<f64>>)>,
}

/// Like [`generate`], then continues the same stream for `holdout` extra
/// pairs and `n_prompts` candidate sets of `n_candidates` responses. The
/// training part equals `generate(config).dataset`.
pub fn generate_bundle(
    config: &SynthConfig,
    holdout: usize,
    n_prompts: usize,
    n_candidates: usize,
) -> Result<SynthBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let teacher = Teacher::new(config.clone(), &mut rng)?;
    let train = draw_pairs(&teacher, config.n_samples, 0, &mut rng)?;
    let holdout = (holdout > 0)
        .then(|| draw_pairs(&teacher, holdout, config.n_samples as u64, &mut rng))
        .transpose()?;
    let candidates = (n_prompts > 0)
        .then(|| draw_candidates(&teacher, n_prompts, n_candidates, &mut rng))
        .transpose()?;
    Ok(SynthBundle {
        teacher,
        train,
        holdout,
        candidates,
    })
}

/// Draws `n` more pairs from an existing teacher, with ids from `first_id`.
pub fn draw_pairs(
    teacher: &Teacher,
    n: usize,
    first_id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<PairDataset> {
    let c = &teacher.config;
    let latent = teacher.latent_dim();
    let mut records = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut id = first_id;
    let mut group = 0u64;
    while records.len() < n {
        let hq = teacher.draw_query(rng);
        let z = teacher.relevant_set(&hq)?;
        let u = teacher.weight_logits(&hq);
        let category = teacher.category(&hq);
        for _ in 0..c.group_size.min(n - records.len()) {
            let la = gaussian_vec(rng, latent, 1.0);
            let lb = gaussian_vec(rng, latent, 1.0);
            let (sa, sb) = (teacher.scores(&la), teacher.scores(&lb));
            let ra = teacher.reward(&u, &sa, &z)?;
            let rb = teacher.reward(&u, &sb, &z)?;
            let dims: Vec<usize> = (0..c.num_dims).filter(|&k| z[k]).collect();
            let p: BTreeMap<usize, Verdict> = dims
                .iter()
                .map(|&k| (k, Verdict::from_gap(sa[k] - sb[k], c.tie_band)))
                .collect();
            let mut l = PreferenceLabels::new(id, dims, p, Verdict::from_gap(ra - rb, c.tie_band));
            l.category = Some(category.clone());
            if c.group_size > 1 {
                l.group = Some(format!("g{group}"));
            }
            records.push(EmbeddingPairRecord {
                id,
                h_q: teacher.observe(&hq, rng),
                h_a: teacher.observe(&teacher.embed_response(&la), rng),
                h_b: teacher.observe(&teacher.embed_response(&lb), rng),
            });
            labels.push(l);
            id += 1;
        }
        group += 1;
    }
    Ok(PairDataset { records, labels })
}

/// Candidate sets of `n_candidates` responses per prompt, plus the clean
/// teacher rewards of every candidate.
pub fn draw_candidates(
    teacher: &Teacher,
    n_prompts: usize,
    n_candidates: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<CandidateSet>, Vec<Vec<f64>>)> {
    let mut sets = Vec::with_capacity(n_prompts);
    let mut rewards = Vec::with_capacity(n_prompts);
    for prompt_id in 0..n_prompts as u64 {
        let hq = teacher.draw_query(rng);
        let z = teacher.relevant_set(&hq)?;
        let u = teacher.weight_logits(&hq);
        let mut responses = Vec::with_capacity(n_candidates);
        let mut r = Vec::with_capacity(n_candidates);
        for _ in 0..n_candidates {
            let lat = gaussian_vec(rng, teacher.latent_dim(), 1.0);
            r.push(teacher.reward(&u, &teacher.scores(&lat), &z)?);
            responses.push(teacher.observe(&teacher.embed_response(&lat), rng));
        }
        sets.push(CandidateSet {
            prompt_id,
            h_q: teacher.observe(&hq, rng),
            responses,
        });
        rewards.push(r);
    }
    Ok((sets, rewards))
}
