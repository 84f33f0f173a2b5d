//! Data selection engine for annotation-efficient active learning.
//!
//! The crate covers the full selection loop over precomputed latent
//! embeddings: statistical uncertainty sampling, seed badcase mining,
//! latent-space broadening via exact k-NN, lookalike-threshold filtering,
//! an attention-based audio fusion kernel with verified gradients, binary
//! evaluation metrics with Beta-posterior uncertainty, and a synthetic
//! corpus generator for end-to-end runs.
//!
//! Everything is deterministic given explicit seeds: scoring and retrieval
//! may run in parallel but produce output identical to the serial path.

pub mod datastore;
pub mod fusion;
pub mod knn;
pub mod lookalike;
pub mod metrics;
mod opt;
pub mod pipeline;
pub mod synth;
pub mod uncertainty;

pub use datastore::{Dims, SampleRecord, SampleSet, SelectionBatch, SelectionEntry, Strategy};
pub use knn::{KnnConfig, Metric, Neighbor, NeighborList};
pub use lookalike::{LookalikeModel, MismatchExample};
pub use metrics::{EvalReport, PrecisionRecallPoint};
pub use uncertainty::{AcquisitionStrategy, SeedRule, SeedSet};
