//! Multi-dimensional reward modeling over precomputed embeddings.
//!
//! Three decoupled heads predict which evaluation dimensions matter for an
//! instruction, score a response on every dimension, and weight the active
//! dimensions into one holistic reward.

pub mod checkpoint;
pub mod consensus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod head;
pub mod kernel;
pub mod objectives;
pub mod synth;
pub mod taxonomy;
pub mod trainer;
pub mod verdict;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use dataset::{EmbeddingPairRecord, PairDataset, PreferenceLabels};
pub use error::{ErrorCategory, MdrError, Result};
pub use head::{count_parameters, HeadConfig, HeadOutputs, HeadParameters, MaskSource, RewardHead};
pub use kernel::{LinearLayer, MlpStack, Mode};
pub use objectives::{LossBreakdown, LossConfig};
pub use trainer::{train, TrainConfig, TrainMask};
pub use verdict::Verdict;
