//! SGD over the learnable prototypes: linear warmup into cosine annealing,
//! uniform batch sampling from the long-tailed pool, optional gradient-norm
//! clipping. One run is strictly sequential; concurrency lives a level up,
//! across runs.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{ClassId, EmbeddingMatrix, FeaturesByClass};
use crate::error::{Error, Result};
use crate::losses::{loss_total, LossBreakdown, LossWeights, TotalLossInputs};
use crate::matrix::Matrix;
use crate::metrics::{evaluate_run, mean_etf_conformance, RunReport};
use crate::scaffold::ClusterScaffold;
use crate::synth::SyntheticTask;

/// Which objective components participate in training. `use_clip` exists so
/// single-loss runs (pure separation or pure anchoring dynamics) can be
/// expressed without a synthetic zero-temperature hack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_clip: bool,
    pub use_tetf: bool,
    pub use_cc: bool,
    pub use_rs: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_clip: true,
            use_tetf: true,
            use_cc: true,
            use_rs: true,
        }
    }
}

impl AblationFlags {
    pub fn none() -> Self {
        AblationFlags {
            use_clip: true,
            use_tetf: false,
            use_cc: false,
            use_rs: false,
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_tetf {
            parts.push("tetf");
        }
        if self.use_cc {
            parts.push("cc");
        }
        if self.use_rs {
            parts.push("rs");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub warmup_epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub flags: AblationFlags,
    pub symmetric_clip: bool,
    /// Std-dev of the Gaussian perturbation applied to the frozen
    /// prototypes at initialization.
    pub init_noise: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// When true, the separation and anchoring terms see only the batch's
    /// clusters / classes instead of the full prototype set.
    pub geometry_per_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 4,
            lr0: 0.0025,
            warmup_epochs: 1,
            weights: LossWeights::default(),
            seed: 0,
            flags: AblationFlags::default(),
            symmetric_clip: false,
            init_noise: 0.01,
            grad_clip: Some(10.0),
            geometry_per_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.lr0 < 0.0 || !self.lr0.is_finite() {
            return Err(Error::InvalidConfig("lr0 must be finite and >= 0".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidSchedule(format!(
                "warmup ({}) must be shorter than the run ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.init_noise < 0.0 {
            return Err(Error::InvalidConfig("init_noise must be >= 0".into()));
        }
        self.weights.validate()
    }

    /// Weights with ablated components zeroed out.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            lambda_tetf: if self.flags.use_tetf {
                self.weights.lambda_tetf
            } else {
                0.0
            },
            lambda_cc: if self.flags.use_cc {
                self.weights.lambda_cc
            } else {
                0.0
            },
            lambda_rs: if self.flags.use_rs {
                self.weights.lambda_rs
            } else {
                0.0
            },
            temperature: self.weights.temperature,
        }
    }

    pub fn with_flags(&self, flags: AblationFlags) -> TrainConfig {
        TrainConfig {
            flags,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub prototypes: EmbeddingMatrix,
    pub epoch: usize,
    pub step: usize,
    /// One breakdown per SGD step.
    pub history: Vec<LossBreakdown>,
    /// Mean equiangularity conformance after each epoch.
    pub per_epoch_conformance: Vec<f64>,
}

/// Linear ramp from 0 to `lr0` over the warmup steps, then cosine annealing
/// `lr0 * (1 + cos(pi * progress)) / 2` where progress spans the remaining
/// steps and reaches 1 at the final one.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step >= total_steps {
        return Err(Error::InvalidSchedule(format!(
            "step {step} outside a run of {total_steps} steps"
        )));
    }
    if warmup_steps >= total_steps {
        return Err(Error::InvalidSchedule(format!(
            "warmup {warmup_steps} must be shorter than the run ({total_steps} steps)"
        )));
    }
    if step < warmup_steps {
        return Ok(lr0 * step as f64 / warmup_steps as f64);
    }
    let span = total_steps - 1 - warmup_steps;
    if span == 0 {
        return Ok(lr0);
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One plain SGD update: `params -= lr * grad`. No momentum.
pub fn sgd_step(params: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be >= 0, got {lr}"
        )));
    }
    params.add_scaled(grad, -lr)
}

/// Runs the full optimization and evaluation. Deterministic given
/// `cfg.seed`: initialization noise and batch sampling both come from one
/// seeded stream.
pub fn train(
    task: &SyntheticTask,
    scaffold: &ClusterScaffold,
    cfg: &TrainConfig,
) -> Result<(TrainState, RunReport)> {
    cfg.validate()?;
    for &class in &task.base_classes {
        if scaffold.cluster_of(class).is_none() {
            return Err(Error::MissingPrototype(class));
        }
        let n = task
            .train_features
            .get(&class)
            .map(|m| m.rows())
            .unwrap_or(0);
        if n == 0 {
            return Err(Error::InvalidConfig(format!(
                "base class {class} has no training samples"
            )));
        }
    }

    let frozen = &task.frozen_prototypes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // init: frozen + sigma * N(0, I), rows in label order
    let mut proto_matrix = frozen.matrix().clone();
    if cfg.init_noise > 0.0 {
        for i in 0..proto_matrix.rows() {
            for v in proto_matrix.row_mut(i) {
                *v += cfg.init_noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let mut prototypes = EmbeddingMatrix::new(frozen.labels().to_vec(), proto_matrix)?;

    // training pool over base classes, fixed order
    let mut pool: Vec<(ClassId, usize)> = Vec::new();
    for &class in &task.base_classes {
        for i in 0..task.train_features[&class].rows() {
            pool.push((class, i));
        }
    }
    let steps_per_epoch = pool.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let weights = cfg.effective_weights();

    let mut history: Vec<LossBreakdown> = Vec::with_capacity(total_steps);
    let mut per_epoch_conformance = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let lr = lr_schedule(step, total_steps, warmup_steps, cfg.lr0)?;

            // uniform draws (with replacement) from the long-tailed pool
            let mut batch_classes = Vec::with_capacity(cfg.batch_size);
            let mut batch_rows = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let (class, row) = pool[rng.random_range(0..pool.len())];
                batch_classes.push(class);
                batch_rows.push(task.train_features[&class].row(row).to_vec());
            }
            let batch_images = Matrix::from_rows(&batch_rows)?;
            let mut cc_features = FeaturesByClass::new();
            {
                let mut grouped: BTreeMap<ClassId, Vec<Vec<f64>>> = BTreeMap::new();
                for (class, row) in batch_classes.iter().zip(batch_images.iter_rows()) {
                    grouped.entry(*class).or_default().push(row.to_vec());
                }
                for (class, rows) in grouped {
                    cc_features.insert(class, Matrix::from_rows(&rows)?);
                }
            }

            let batch_cluster_filter: Option<BTreeSet<u32>> = cfg.geometry_per_batch.then(|| {
                batch_classes
                    .iter()
                    .filter_map(|c| scaffold.cluster_of(*c))
                    .collect()
            });
            let batch_class_filter: Option<BTreeSet<ClassId>> = cfg
                .geometry_per_batch
                .then(|| batch_classes.iter().copied().collect());

            let (breakdown, mut grad) = loss_total(
                &TotalLossInputs {
                    prototypes: &prototypes,
                    frozen,
                    scaffold,
                    batch_images: &batch_images,
                    batch_classes: &batch_classes,
                    cc_features: &cc_features,
                    symmetric_clip: cfg.symmetric_clip,
                    include_clip: cfg.flags.use_clip,
                    tetf_cluster_filter: batch_cluster_filter.as_ref(),
                    rs_class_filter: batch_class_filter.as_ref(),
                },
                &weights,
            )?;

            if !breakdown.is_finite() {
                return Err(Error::DivergenceDetected { step, history });
            }
            if let Some(ceiling) = cfg.grad_clip {
                let n = grad.frobenius_norm();
                if n > ceiling {
                    grad.scale(ceiling / n);
                }
            }
            sgd_step(prototypes.matrix_mut(), &grad, lr)?;
            history.push(breakdown);
            step += 1;
        }
        per_epoch_conformance.push(mean_etf_conformance(&prototypes, scaffold)?);
    }

    let per_epoch = epoch_means(&history, steps_per_epoch);
    let report = evaluate_run(task, scaffold, &prototypes, cfg, per_epoch)?;
    let state = TrainState {
        prototypes,
        epoch: cfg.epochs,
        step,
        history,
        per_epoch_conformance,
    };
    Ok((state, report))
}

fn epoch_means(history: &[LossBreakdown], steps_per_epoch: usize) -> Vec<LossBreakdown> {
    history
        .chunks(steps_per_epoch)
        .map(|chunk| {
            let n = chunk.len() as f64;
            LossBreakdown {
                clip: chunk.iter().map(|b| b.clip).sum::<f64>() / n,
                tetf_raw: chunk.iter().map(|b| b.tetf_raw).sum::<f64>() / n,
                tetf_centered: chunk.iter().map(|b| b.tetf_centered).sum::<f64>() / n,
                cc: chunk.iter().map(|b| b.cc).sum::<f64>() / n,
                rs: chunk.iter().map(|b| b.rs).sum::<f64>() / n,
                total: chunk.iter().map(|b| b.total).sum::<f64>() / n,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scaffold::kmeans_cosine;
    use crate::synth::{generate_task, TaskParams};

    fn tiny_task() -> SyntheticTask {
        generate_task(&TaskParams {
            m_planted: 2,
            classes_per_cluster: 3,
            dim: 8,
            intra_cluster_angle_deg: 20.0,
            feature_noise: 0.1,
            prototype_noise: 0.05,
            tau: 0.25,
            n_max: 6,
            test_per_class: 8,
            seed: 21,
            text_compression: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn schedule_ramp_and_tail() {
        // ramp start
        assert_eq!(lr_schedule(0, 100, 10, 0.5).unwrap(), 0.0);
        // ramp end / cosine start
        assert_eq!(lr_schedule(10, 100, 10, 0.5).unwrap(), 0.5);
        // final step: cos(pi) kills the rate
        let last = lr_schedule(99, 100, 10, 0.5).unwrap();
        assert!(last.abs() < 1e-15, "got {last}");
        // no warmup: starts at lr0
        assert_eq!(lr_schedule(0, 10, 0, 0.5).unwrap(), 0.5);
        // midpoint of the cosine phase is lr0/2
        let mid = lr_schedule(55, 101, 10, 0.5).unwrap();
        assert!((mid - 0.25).abs() < 1e-12);
    }

    #[test]
    fn schedule_rejects_bad_arguments() {
        assert!(lr_schedule(5, 5, 1, 0.1).is_err());
        assert!(lr_schedule(0, 5, 5, 0.1).is_err());
    }

    #[test]
    fn sgd_step_noop_cases() {
        let mut p = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let zero = Matrix::zeros(1, 2);
        sgd_step(&mut p, &zero, 0.3).unwrap();
        assert_eq!(p.row(0), &[1.0, 2.0]);
        let g = Matrix::from_rows(&[vec![5.0, -5.0]]).unwrap();
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p.row(0), &[1.0, 2.0]);
        assert!(sgd_step(&mut p, &g, -1.0).is_err());
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(x) = x^2, grad 2x, lr 0.1: x_n = 0.8^n from x0 = 1
        let mut x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        for _ in 0..100 {
            let g = Matrix::from_rows(&[vec![2.0 * x.get(0, 0)]]).unwrap();
            sgd_step(&mut x, &g, 0.1).unwrap();
        }
        assert!(x.get(0, 0).abs() < 1e-3);
        assert!((x.get(0, 0) - 0.8f64.powi(100)).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_zero_lr_leaves_prototypes_unchanged() {
        let task = tiny_task();
        let scaffold = kmeans_cosine(&task.frozen_prototypes, 2, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            lr0: 0.0,
            init_noise: 0.0,
            weights: LossWeights {
                lambda_tetf: 0.0,
                lambda_cc: 0.0,
                lambda_rs: 0.0,
                temperature: 0.07,
            },
            ..TrainConfig::default()
        };
        let (state, _) = train(&task, &scaffold, &cfg).unwrap();
        assert_eq!(
            state.prototypes.matrix(),
            task.frozen_prototypes.matrix(),
            "no learning signal may move the prototypes"
        );
        // with the contrastive term also off, the objective is identically 0
        let cfg = TrainConfig {
            flags: AblationFlags {
                use_clip: false,
                ..AblationFlags::none()
            },
            ..cfg
        };
        let (state, _) = train(&task, &scaffold, &cfg).unwrap();
        assert!(state.history.iter().all(|b| b.total == 0.0));
    }

    #[test]
    fn rs_only_run_shrinks_the_anchoring_gap() {
        let task = tiny_task();
        let scaffold = kmeans_cosine(&task.frozen_prototypes, 2, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            lr0: 0.05,
            init_noise: 0.05,
            flags: AblationFlags {
                use_clip: false,
                use_tetf: false,
                use_cc: false,
                use_rs: true,
            },
            weights: LossWeights {
                lambda_rs: 1.0,
                ..LossWeights::default()
            },
            seed: 5,
            ..TrainConfig::default()
        };
        let (state, _) = train(&task, &scaffold, &cfg).unwrap();
        let initial = state.history.first().unwrap().rs;
        let last = state.history.last().unwrap().rs;
        assert!(
            last < initial,
            "anchoring gap must shrink: {initial} -> {last}"
        );
    }

    #[test]
    fn tetf_only_run_reaches_the_simplex_on_one_cluster() {
        // one 3-class cluster: off-diagonals must approach -0.5
        let task = generate_task(&TaskParams {
            m_planted: 2,
            classes_per_cluster: 3,
            dim: 8,
            intra_cluster_angle_deg: 25.0,
            feature_noise: 0.05,
            prototype_noise: 0.02,
            tau: 1.0,
            n_max: 4,
            test_per_class: 4,
            seed: 2,
            text_compression: 1.0,
        })
        .unwrap();
        // scaffold: the two planted clusters; inspect the first one
        let scaffold = crate::scaffold::ClusterScaffold::from_mapping(
            &task.frozen_prototypes,
            task.planted_mapping(),
            crate::scaffold::ClusterAlgorithm::KMeansCosine,
            0,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            warmup_epochs: 1,
            lr0: 0.2,
            init_noise: 0.0,
            flags: AblationFlags {
                use_clip: false,
                use_tetf: true,
                use_cc: false,
                use_rs: false,
            },
            weights: LossWeights {
                lambda_tetf: 1.0,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        };
        let (state, _) = train(&task, &scaffold, &cfg).unwrap();
        let conf = crate::metrics::etf_conformance(&state.prototypes, &scaffold).unwrap();
        for (&cid, &dev) in &conf {
            assert!(dev < 0.05, "cluster {cid} off-target by {dev}");
        }
    }

    #[test]
    fn identical_config_is_bitwise_deterministic() {
        let task = tiny_task();
        let scaffold = kmeans_cosine(&task.frozen_prototypes, 2, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let (s1, r1) = train(&task, &scaffold, &cfg).unwrap();
        let (s2, r2) = train(&task, &scaffold, &cfg).unwrap();
        assert_eq!(s1.prototypes.matrix().data(), s2.prototypes.matrix().data());
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
    }

    #[test]
    fn late_training_loss_trend_is_nonincreasing() {
        let task = tiny_task();
        let scaffold = kmeans_cosine(&task.frozen_prototypes, 2, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 12,
            seed: 4,
            ..TrainConfig::default()
        };
        let (_, report) = train(&task, &scaffold, &cfg).unwrap();
        // mean total over the last quarter of epochs must not exceed the
        // preceding quarter
        let per_epoch = &report.per_epoch;
        let q = per_epoch.len() / 4;
        let last: f64 = per_epoch[per_epoch.len() - q..]
            .iter()
            .map(|b| b.total)
            .sum::<f64>()
            / q as f64;
        let prev: f64 = per_epoch[per_epoch.len() - 2 * q..per_epoch.len() - q]
            .iter()
            .map(|b| b.total)
            .sum::<f64>()
            / q as f64;
        assert!(
            last <= prev + 0.05,
            "late-training trend regressed: {prev} -> {last}"
        );
    }

    #[test]
    fn history_length_matches_steps() {
        let task = tiny_task();
        let scaffold = kmeans_cosine(&task.frozen_prototypes, 2, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let (state, report) = train(&task, &scaffold, &cfg).unwrap();
        assert_eq!(state.history.len(), state.step);
        assert_eq!(report.per_epoch.len(), 2);
        assert!(state.prototypes.matrix().is_finite());
    }

    #[test]
    fn breakdown_identity_holds_throughout() {
        let task = tiny_task();
        let scaffold = kmeans_cosine(&task.frozen_prototypes, 2, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 31,
            ..TrainConfig::default()
        };
        let w = cfg.effective_weights();
        let (state, _) = train(&task, &scaffold, &cfg).unwrap();
        for b in &state.history {
            let expect =
                b.clip + w.lambda_tetf * b.tetf_raw + w.lambda_cc * b.cc + w.lambda_rs * b.rs;
            assert!((b.total - expect).abs() < 1e-12);
            assert!(b.tetf_centered >= -1e-9);
        }
    }
}
