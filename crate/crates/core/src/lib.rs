//! Cluster-aware prototype tuning on the unit sphere, at desk scale.
//!
//! The library models a prompt-tuning-like setup where the only learnable
//! objects are per-class prototype vectors. A frozen cluster scaffold is
//! mined once from the pre-trained prototypes; training then optimizes a
//! contrastive objective plus three geometric regularizers (within-cluster
//! equiangular separation, class-wise convergence of features onto their
//! prototype, and an L1 anchor to the frozen prototypes).
//!
//! Modules map onto the moving parts:
//!
//! - [`embedding`]: dense row matrices on the sphere, cosine Gram matrices,
//!   spectral effective rank, CSV round-tripping.
//! - [`scaffold`]: one-shot K-means / K-medoids clustering of frozen
//!   prototypes, cosine silhouette model selection, JSON round-tripping.
//! - [`losses`]: the four objectives as value-and-gradient functions.
//! - [`gradcheck`]: central-difference gradient oracle.
//! - [`trainer`]: SGD with warmup + cosine annealing over the prototypes.
//! - [`synth`]: long-tailed synthetic tasks with planted cluster structure.
//! - [`metrics`]: nearest-prototype accuracies, ETF conformance, spreads.
//! - [`runners`]: ablation / sweep / stability / clustering experiment grids.
//! - [`exec`]: data-parallel cell execution (rayon behind the `parallel`
//!   feature, sequential fallback otherwise).

pub mod config;
pub mod embedding;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod report;
pub mod runners;
pub mod scaffold;
pub mod synth;
pub mod trainer;

pub use embedding::{ClassId, EmbeddingMatrix, FeaturesByClass, SimilarityMatrix};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossWeights};
pub use matrix::Matrix;
pub use scaffold::{ClusterAlgorithm, ClusterScaffold};
pub use synth::{SyntheticTask, TaskParams};
pub use trainer::{AblationFlags, TrainConfig, TrainState};
