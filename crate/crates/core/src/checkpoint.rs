//! Binary checkpoints for a [`RewardHead`].
//!
//! ```text
//! "MDRW" | u32 version=1 | u32 n_stacks
//! per stack:  u32 n_layers, then per layer u32 fan_out | u32 fan_in | f64 weights (row-major)
//! JSON metadata (UTF-8)
//! u64 length of the JSON metadata
//! ```
//!
//! Stacks are stored in dimension, scoring, weighting order. All integers and
//! floats are little-endian.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{MdrError, Result};
use crate::head::{HeadConfig, HeadParameters, RewardHead};
use crate::kernel::{LinearLayer, MlpStack, ACTIVATION};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDRW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: HeadConfig,
    pub activation: String,
    /// Seed the parameters were initialized from, when known.
    pub seed: Option<u64>,
    /// Optimizer steps taken before this snapshot.
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub epoch: usize,
    #[serde(default)]
    pub train_loss: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(config: HeadConfig, seed: Option<u64>) -> Self {
        Self {
            config,
            activation: ACTIVATION.to_string(),
            seed,
            step: 0,
            epoch: 0,
            train_loss: None,
        }
    }
}

pub fn encode_checkpoint(head: &RewardHead, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if meta.config != head.config {
        return Err(MdrError::InvalidConfig(
            "checkpoint metadata config differs from the head config".into(),
        ));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let stacks = head.params.stacks();
    buf.extend_from_slice(&(stacks.len() as u32).to_le_bytes());
    for stack in stacks {
        buf.extend_from_slice(&(stack.layers().len() as u32).to_le_bytes());
        for layer in stack.layers() {
            buf.extend_from_slice(&(layer.fan_out() as u32).to_le_bytes());
            buf.extend_from_slice(&(layer.fan_in() as u32).to_le_bytes());
            for x in layer.weight().iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let json = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    Ok(buf)
}

fn corrupt(offset: usize, message: impl Into<String>) -> MdrError {
    MdrError::Corrupt {
        offset: offset as u64,
        message: message.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(RewardHead, CheckpointMeta)> {
    if bytes.len() < 20 {
        return Err(corrupt(0, "file too short for a checkpoint"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt(0, "bad magic, not a weight checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(4, format!("unsupported version {version}")));
    }
    let footer = bytes.len() - 8;
    let json_len = u64::from_le_bytes(bytes[footer..].try_into().unwrap()) as usize;
    if json_len > footer - 8 {
        return Err(corrupt(footer, "metadata length exceeds file size"));
    }
    let json_start = footer - json_len;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[json_start..footer])
        .map_err(|e| corrupt(json_start, format!("metadata: {e}")))?;
    if meta.activation != ACTIVATION {
        return Err(MdrError::InvalidConfig(format!(
            "unsupported activation {:?}",
            meta.activation
        )));
    }
    meta.config.validate()?;

    let mut cur = Cursor {
        bytes: &bytes[..json_start],
        pos: 8,
    };
    let n_stacks = cur.u32("stack count")?;
    if n_stacks != 3 {
        return Err(corrupt(8, format!("expected 3 stacks, found {n_stacks}")));
    }
    let dropout = meta.config.dropout_rate;
    let mut stacks = Vec::with_capacity(3);
    for _ in 0..n_stacks {
        let n_layers = cur.u32("layer count")?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let at = cur.pos;
            let fan_out = cur.u32("fan_out")?;
            let fan_in = cur.u32("fan_in")?;
            let n = fan_out
                .checked_mul(fan_in)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| corrupt(at, "layer shape overflows"))?;
            let raw = cur.take(n, "layer weights")?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let w = Array2::from_shape_vec((fan_out, fan_in), data)
                .map_err(|e| corrupt(at, e.to_string()))?;
            layers.push(LinearLayer::new(w)?);
        }
        stacks.push(MlpStack::new(layers, dropout)?);
    }
    if cur.pos != json_start {
        return Err(corrupt(cur.pos, "unexpected bytes between weights and metadata"));
    }
    let weighting = stacks.pop().unwrap();
    let scoring = stacks.pop().unwrap();
    let dimension = stacks.pop().unwrap();
    let params = HeadParameters {
        dimension,
        scoring,
        weighting,
    };
    let head = RewardHead::new(meta.config.clone(), params)?;
    Ok((head, meta))
}

pub fn save_checkpoint(head: &RewardHead, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(head, meta)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(RewardHead, CheckpointMeta)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
