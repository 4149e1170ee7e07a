//! The JSON experiment configuration: four blocks (task, scaffold, train,
//! weights), each optional with documented defaults. Unknown fields are
//! rejected so typos fail loudly.

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::scaffold::{
    kmeans_cosine, kmeans_euclidean, kmedoids_cosine, select_scaffold, ClusterAlgorithm,
    ClusterScaffold,
};
use crate::synth::TaskParams;
use crate::trainer::{AblationFlags, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaffoldConfig {
    pub algorithm: ClusterAlgorithm,
    /// Cluster count; `None` targets roughly 16 classes per cluster unless
    /// a candidate grid is given.
    pub m: Option<usize>,
    pub seed: u64,
    /// When set, the scaffold is chosen by cosine silhouette over this
    /// `M` grid (crossed with `candidate_seeds`).
    pub candidate_ms: Option<Vec<usize>>,
    pub candidate_seeds: Option<Vec<u64>>,
}

impl Default for ScaffoldConfig {
    fn default() -> Self {
        ScaffoldConfig {
            algorithm: ClusterAlgorithm::KMeansCosine,
            m: None,
            seed: 11,
            candidate_ms: None,
            candidate_seeds: None,
        }
    }
}

impl ScaffoldConfig {
    /// Builds (or selects) the scaffold from frozen prototypes.
    pub fn build(&self, frozen: &EmbeddingMatrix) -> Result<ClusterScaffold> {
        if let Some(ms) = &self.candidate_ms {
            let seeds = self
                .candidate_seeds
                .clone()
                .unwrap_or_else(|| vec![self.seed]);
            return select_scaffold(frozen, ms, self.algorithm, &seeds);
        }
        let m = self
            .m
            .unwrap_or_else(|| ClusterScaffold::default_m(frozen.len()));
        match self.algorithm {
            ClusterAlgorithm::KMeansCosine => kmeans_cosine(frozen, m, self.seed),
            ClusterAlgorithm::KMeansEuclidean => kmeans_euclidean(frozen, m, self.seed),
            ClusterAlgorithm::KMedoidsCosine => kmedoids_cosine(frozen, m, self.seed),
        }
    }
}

/// Train block without the weights (those form their own block).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBlock {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub use_clip: bool,
    pub use_tetf: bool,
    pub use_cc: bool,
    pub use_rs: bool,
    pub symmetric_clip: bool,
    pub init_noise: f64,
    pub grad_clip: Option<f64>,
    pub geometry_per_batch: bool,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainBlock {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            warmup_epochs: t.warmup_epochs,
            seed: t.seed,
            use_clip: t.flags.use_clip,
            use_tetf: t.flags.use_tetf,
            use_cc: t.flags.use_cc,
            use_rs: t.flags.use_rs,
            symmetric_clip: t.symmetric_clip,
            init_noise: t.init_noise,
            grad_clip: t.grad_clip,
            geometry_per_batch: t.geometry_per_batch,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskParams,
    pub scaffold: ScaffoldConfig,
    pub train: TrainBlock,
    pub weights: LossWeights,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Assembles the runnable training configuration from the train and
    /// weights blocks.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr0: self.train.lr0,
            warmup_epochs: self.train.warmup_epochs,
            weights: self.weights,
            seed: self.train.seed,
            flags: AblationFlags {
                use_clip: self.train.use_clip,
                use_tetf: self.train.use_tetf,
                use_cc: self.train.use_cc,
                use_rs: self.train.use_rs,
            },
            symmetric_clip: self.train.symmetric_clip,
            init_noise: self.train.init_noise,
            grad_clip: self.train.grad_clip,
            geometry_per_batch: self.train.geometry_per_batch,
        }
    }
}
