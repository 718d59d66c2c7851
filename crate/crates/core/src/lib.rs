//! Composed image retrieval on precomputed embeddings.
//!
//! A linear adapter fuses a reference-image embedding with a modification-text
//! embedding into a query vector and scores corpus images by temperature-scaled
//! cosine similarity. Training maximizes the Bradley-Terry likelihood that the
//! annotated target beats one sampled hard negative per query, where the
//! negatives come from the band between the two steepest score drops below
//! the target.
//!
//! Modules:
//! - [`store`]: the binary embedding format, JSONL manifests, validation.
//! - [`scorer`]: adapter parameters, scoring, and exact ranking.
//! - [`miner`]: hard-negative set definition and the ablation strategies.
//! - [`trainer`]: loss, gradients, AdamW, checkpoints, and the training loop.
//! - [`evaluator`]: recall, subset recall, mAP, set relevance, preference rate.
//! - [`synthgen`]: planted synthetic datasets.
//! - [`cli`]: the `qure` command-line tool.

pub mod cli;
pub mod error;
pub mod evaluator;
pub mod miner;
pub mod rng;
pub mod scorer;
pub mod store;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use evaluator::{EvalReport, GroundTruth, Metric, PreferenceRecord, TruthTable};
pub use miner::{mine_all, HardNegativeSet, MinerStats, Strategy};
pub use scorer::{AdapterParams, RankedList, Scorer};
pub use store::{Dataset, DatasetManifest, EmbeddingMatrix, QueryRecord};
pub use synthgen::{generate, SynthConfig, SynthDataset};
pub use trainer::{train, Checkpoint, TrainingConfig, TrainingLog};
