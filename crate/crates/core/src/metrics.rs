//! Evaluation metrics and the per-run report: nearest-prototype accuracy,
//! harmonic means, per-cluster equiangularity conformance, angular spreads,
//! effective-rank bookkeeping and partition agreement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::{
    effective_rank, gram_of_matrix, normalize_matrix, ClassId, EmbeddingMatrix, FeaturesByClass,
};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::matrix::{dot, Matrix};
use crate::scaffold::ClusterScaffold;
use crate::trainer::TrainConfig;

/// Percentage of test features whose maximum-cosine prototype matches their
/// label. `subset` is both the evaluated class set and the candidate
/// prototype set; argmax ties resolve to the smallest class id.
pub fn nearest_prototype_accuracy(
    features: &FeaturesByClass,
    prototypes: &EmbeddingMatrix,
    subset: &[ClassId],
) -> Result<f64> {
    accuracy_with_candidates(features, prototypes, subset, subset)
}

/// Like [`nearest_prototype_accuracy`] but with separate evaluated and
/// candidate class sets (used for head/tail accuracies, which classify
/// against every base prototype).
pub fn accuracy_with_candidates(
    features: &FeaturesByClass,
    prototypes: &EmbeddingMatrix,
    eval_classes: &[ClassId],
    candidates: &[ClassId],
) -> Result<f64> {
    if eval_classes.is_empty() || candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let index = prototypes.label_index()?;
    let unit = normalize_matrix(prototypes.matrix())?;
    let mut sorted_candidates = candidates.to_vec();
    sorted_candidates.sort_unstable();
    sorted_candidates.dedup();
    let candidate_rows: Vec<(ClassId, usize)> = sorted_candidates
        .iter()
        .map(|&c| {
            index
                .get(&c)
                .map(|&r| (c, r))
                .ok_or(Error::MissingPrototype(c))
        })
        .collect::<Result<_>>()?;

    let mut correct = 0usize;
    let mut total = 0usize;
    for &class in eval_classes {
        let Some(feats) = features.get(&class) else {
            continue;
        };
        for row in feats.iter_rows() {
            let n = crate::matrix::norm(row);
            if n <= crate::embedding::ZERO_NORM_EPS {
                return Err(Error::ZeroNormRow(total));
            }
            let mut best = (candidate_rows[0].0, f64::NEG_INFINITY);
            for &(cand, r) in &candidate_rows {
                let s = dot(row, unit.row(r)) / n;
                if s > best.1 {
                    best = (cand, s);
                }
            }
            if best.0 == class {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// `2ab / (a + b)`, zero when both inputs are zero.
pub fn harmonic_mean(base_acc: f64, new_acc: f64) -> f64 {
    if base_acc + new_acc <= 0.0 {
        0.0
    } else {
        2.0 * base_acc * new_acc / (base_acc + new_acc)
    }
}

/// Per multi-class cluster: the worst absolute deviation of an off-diagonal
/// cosine from the equiangular target `-1/(k-1)`. Zero exactly at an ETF.
pub fn etf_conformance(
    prototypes: &EmbeddingMatrix,
    scaffold: &ClusterScaffold,
) -> Result<BTreeMap<u32, f64>> {
    let index = prototypes.label_index()?;
    let unit = normalize_matrix(prototypes.matrix())?;
    let mut out = BTreeMap::new();
    for (cid, members) in scaffold.iter_clusters() {
        let k = members.len();
        if k < 2 {
            continue;
        }
        let target = -1.0 / (k as f64 - 1.0);
        let rows: Vec<usize> = members
            .iter()
            .map(|c| index.get(c).copied().ok_or(Error::MissingPrototype(*c)))
            .collect::<Result<_>>()?;
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in (i + 1)..k {
                let s = dot(unit.row(rows[i]), unit.row(rows[j])).clamp(-1.0, 1.0);
                worst = worst.max((s - target).abs());
            }
        }
        out.insert(cid, worst);
    }
    Ok(out)
}

/// Mean over multi-class clusters of the per-cluster conformance value.
pub fn mean_etf_conformance(
    prototypes: &EmbeddingMatrix,
    scaffold: &ClusterScaffold,
) -> Result<f64> {
    let per = etf_conformance(prototypes, scaffold)?;
    if per.is_empty() {
        return Ok(0.0);
    }
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

/// Mean angular deviation (degrees) between features and their class
/// prototype.
pub fn intra_class_spread(features: &FeaturesByClass, prototypes: &EmbeddingMatrix) -> Result<f64> {
    let index = prototypes.label_index()?;
    let unit = normalize_matrix(prototypes.matrix())?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (&class, feats) in features {
        let row = *index.get(&class).ok_or(Error::MissingPrototype(class))?;
        for f in feats.iter_rows() {
            let n = crate::matrix::norm(f);
            if n <= crate::embedding::ZERO_NORM_EPS {
                return Err(Error::ZeroNormRow(count));
            }
            let cosine = (dot(f, unit.row(row)) / n).clamp(-1.0, 1.0);
            total += cosine.acos().to_degrees();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(total / count as f64)
}

/// Adjusted Rand index between two partitions of the same class set; 1.0
/// exactly when the partitions coincide up to relabeling.
pub fn adjusted_rand_index(a: &BTreeMap<ClassId, u32>, b: &BTreeMap<ClassId, u32>) -> f64 {
    let classes: Vec<ClassId> = a.keys().copied().collect();
    let n = classes.len();
    if n < 2 {
        return 1.0;
    }
    let mut table: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut row_sums: BTreeMap<u32, usize> = BTreeMap::new();
    let mut col_sums: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in &classes {
        let (ca, cb) = (a[&c], b[&c]);
        *table.entry((ca, cb)).or_default() += 1;
        *row_sums.entry(ca).or_default() += 1;
        *col_sums.entry(cb).or_default() += 1;
    }
    let choose2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_table: f64 = table.values().map(|&v| choose2(v)).sum();
    let sum_rows: f64 = row_sums.values().map(|&v| choose2(v)).sum();
    let sum_cols: f64 = col_sums.values().map(|&v| choose2(v)).sum();
    let total = choose2(n);
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-15 {
        return 1.0;
    }
    (sum_table - expected) / (max_index - expected)
}

/// Tail classes have training counts at most the median; head classes sit
/// strictly above it. With balanced counts both sides degenerate to the
/// full set.
pub fn head_tail_split(counts: &BTreeMap<ClassId, usize>) -> (Vec<ClassId>, Vec<ClassId>) {
    let mut values: Vec<usize> = counts.values().copied().collect();
    values.sort_unstable();
    let n = values.len();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let median = if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    };
    let tail: Vec<ClassId> = counts
        .iter()
        .filter(|(_, &v)| (v as f64) <= median)
        .map(|(&c, _)| c)
        .collect();
    let head: Vec<ClassId> = counts
        .iter()
        .filter(|(_, &v)| (v as f64) > median)
        .map(|(&c, _)| c)
        .collect();
    if head.is_empty() {
        // balanced counts: no meaningful head/tail distinction
        let all: Vec<ClassId> = counts.keys().copied().collect();
        return (all.clone(), all);
    }
    (head, tail)
}

/// Sample mean and (n-1) standard deviation; std is 0 for fewer than two
/// points.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub base: f64,
    pub new: f64,
    pub harmonic: f64,
    pub head: f64,
    pub tail: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryMetrics {
    /// Per-cluster worst deviation from the equiangular target.
    pub etf_conformance: BTreeMap<u32, f64>,
    /// Mean angular deviation of test features from their prototype, degrees.
    pub intra_class_spread: f64,
    /// Spectral effective rank of the frozen-prototype similarity matrix.
    pub effective_rank_before: f64,
    /// Same, for the trained prototypes.
    pub effective_rank_after: f64,
    /// Worst entrywise change between the frozen and trained cluster-centroid
    /// similarity matrices.
    pub centroid_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub accuracies: Accuracies,
    pub geometry: GeometryMetrics,
    pub per_epoch: Vec<LossBreakdown>,
    pub config: TrainConfig,
}

/// Builds the evaluation report for a finished run.
pub fn evaluate_run(
    task: &crate::synth::SyntheticTask,
    scaffold: &ClusterScaffold,
    trained: &EmbeddingMatrix,
    cfg: &TrainConfig,
    per_epoch: Vec<LossBreakdown>,
) -> Result<RunReport> {
    let base = nearest_prototype_accuracy(&task.test_features, trained, &task.base_classes)?;
    let new = nearest_prototype_accuracy(&task.test_features, trained, &task.new_classes)?;
    let (head_classes, tail_classes) = head_tail_split(&task.counts);
    let head = accuracy_with_candidates(
        &task.test_features,
        trained,
        &head_classes,
        &task.base_classes,
    )?;
    let tail = accuracy_with_candidates(
        &task.test_features,
        trained,
        &tail_classes,
        &task.base_classes,
    )?;

    let frozen = &task.frozen_prototypes;
    let geometry = GeometryMetrics {
        etf_conformance: etf_conformance(trained, scaffold)?,
        intra_class_spread: intra_class_spread(&task.test_features, trained)?,
        effective_rank_before: effective_rank(&crate::embedding::gram_matrix(frozen)?)?,
        effective_rank_after: effective_rank(&crate::embedding::gram_matrix(trained)?)?,
        centroid_drift: centroid_drift(frozen, trained, scaffold)?,
    };
    Ok(RunReport {
        config_hash: config_hash(cfg)?,
        seed: cfg.seed,
        accuracies: Accuracies {
            base,
            new,
            harmonic: harmonic_mean(base, new),
            head,
            tail,
        },
        geometry,
        per_epoch,
        config: cfg.clone(),
    })
}

/// Worst entrywise change between the cluster-centroid similarity matrices
/// computed from the frozen and the trained prototypes (fresh plain-mean
/// centroids on both sides).
pub fn centroid_drift(
    frozen: &EmbeddingMatrix,
    trained: &EmbeddingMatrix,
    scaffold: &ClusterScaffold,
) -> Result<f64> {
    if scaffold.m() < 2 {
        return Ok(0.0);
    }
    let before = gram_of_matrix(&cluster_means(frozen, scaffold)?)?;
    let after = gram_of_matrix(&cluster_means(trained, scaffold)?)?;
    let mut worst = 0.0f64;
    for i in 0..before.size() {
        for j in 0..before.size() {
            worst = worst.max((before.get(i, j) - after.get(i, j)).abs());
        }
    }
    Ok(worst)
}

fn cluster_means(prototypes: &EmbeddingMatrix, scaffold: &ClusterScaffold) -> Result<Matrix> {
    let index = prototypes.label_index()?;
    let mut rows = Vec::with_capacity(scaffold.m());
    for (_, members) in scaffold.iter_clusters() {
        let mut mean = vec![0.0; prototypes.dim()];
        for c in members {
            let r = *index.get(c).ok_or(Error::MissingPrototype(*c))?;
            for (a, b) in mean.iter_mut().zip(prototypes.row(r)) {
                *a += b;
            }
        }
        for a in &mut mean {
            *a /= members.len() as f64;
        }
        rows.push(mean);
    }
    Matrix::from_rows(&rows)
}

/// FNV-1a over the canonical JSON encoding; stable across runs and
/// platforms.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let json = serde_json::to_string(cfg)?;
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("{hash:016x}"))
}
