//! Embedding-aware detection and segmentation heads for zero-shot recognition.
//!
//! Classifier, box regressor and mask segmentor outputs are all scored against
//! unit-normalized category embeddings, so categories without training
//! annotations get predictions through their embeddings alone. The crate covers
//! the heads and their losses, head fine-tuning on frozen proposal features,
//! zero-shot inference, COCO-style evaluation and a synthetic data generator.

pub mod bbox;
pub mod bench;
pub mod embed;
pub mod error;
pub mod heads;
pub mod infer;
pub mod io;
pub mod learn;
pub mod mask;
pub mod metrics;
pub mod synthgen;

pub use bbox::BBox;
pub use embed::{BackgroundKind, BackgroundMode, CategorySpace, CategorySplit, EmbeddingTable};
pub use error::{Error, Result};
pub use heads::{HeadParams, ProposalRecord, TransferVariant};
pub use infer::{Detection, InferConfig, Origin, TaskMode};
pub use learn::{ClassifierLoss, TrainConfig};
pub use mask::MaskGrid;
pub use metrics::{evaluate, harmonic_mean, EvalReport};
pub use synthgen::{generate, SynthConfig, SynthDataset};
