//! Experiment grids: component ablation, loss-weight sweeps, seed-stability
//! comparison, cluster-size sweep and clustering-algorithm ablation.
//!
//! Every grid flattens its `(variant, seed)` cells and fans them out through
//! [`crate::exec`]; cells are keyed by index and collected in input order,
//! so reports and CSVs are identical however many workers run them.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::par_map_indices;
use crate::metrics::{adjusted_rand_index, mean_std, RunReport};
use crate::report::{fmt_pct, fmt_val, write_csv};
use crate::scaffold::{
    kmeans_cosine, kmeans_euclidean, kmedoids_cosine, ClusterAlgorithm, ClusterScaffold,
};
use crate::synth::SyntheticTask;
use crate::trainer::{train, AblationFlags, TrainConfig};

/// One `(variant, seed)` training cell.
#[derive(Clone, Debug, Serialize)]
pub struct Cell {
    pub variant: String,
    pub seed: u64,
    pub report: RunReport,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

fn summarize<F: Fn(&RunReport) -> f64>(reports: &[&RunReport], f: F) -> MetricSummary {
    let xs: Vec<f64> = reports.iter().map(|r| f(r)).collect();
    let (mean, std) = mean_std(&xs);
    MetricSummary { mean, std }
}

/// Trains one cell per `(variant, seed)` pair; variants may carry their own
/// scaffold (the stability grid does).
fn run_grid(
    task: &SyntheticTask,
    variants: &[(String, ClusterScaffold, TrainConfig)],
    seeds: &[u64],
) -> Result<Vec<Cell>> {
    if seeds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = variants.len() * seeds.len();
    let outcomes = par_map_indices(n, |i| {
        let (vi, si) = (i / seeds.len(), i % seeds.len());
        let (name, scaffold, cfg) = &variants[vi];
        train(task, scaffold, &cfg.with_seed(seeds[si])).map(|(_, report)| Cell {
            variant: name.clone(),
            seed: seeds[si],
            report,
        })
    });
    outcomes.into_iter().collect()
}

// ---------------------------------------------------------------------------
// component ablation
// ---------------------------------------------------------------------------

/// The five standard flag combinations, in table order.
pub fn ablation_variants() -> Vec<(String, AblationFlags)> {
    let f = |tetf, cc, rs| AblationFlags {
        use_clip: true,
        use_tetf: tetf,
        use_cc: cc,
        use_rs: rs,
    };
    vec![
        ("(1) none".to_string(), f(false, false, false)),
        ("(2) tetf".to_string(), f(true, false, false)),
        ("(3) tetf+cc".to_string(), f(true, true, false)),
        ("(4) tetf+rs".to_string(), f(true, false, true)),
        ("(5) tetf+cc+rs".to_string(), f(true, true, true)),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub base: MetricSummary,
    pub new: MetricSummary,
    pub harmonic: MetricSummary,
    pub head: MetricSummary,
    pub tail: MetricSummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub cells: Vec<Cell>,
}

/// Five rows (component combinations) by `seeds` columns; each metric is
/// reported as seed mean ± std.
pub fn run_ablation(
    task: &SyntheticTask,
    scaffold: &ClusterScaffold,
    base_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    let variants: Vec<(String, ClusterScaffold, TrainConfig)> = ablation_variants()
        .into_iter()
        .map(|(label, flags)| (label, scaffold.clone(), base_cfg.with_flags(flags)))
        .collect();
    let cells = run_grid(task, &variants, seeds)?;
    let rows = variants
        .iter()
        .map(|(label, _, _)| {
            let of_row: Vec<&RunReport> = cells
                .iter()
                .filter(|c| &c.variant == label)
                .map(|c| &c.report)
                .collect();
            AblationRow {
                label: label.clone(),
                base: summarize(&of_row, |r| r.accuracies.base),
                new: summarize(&of_row, |r| r.accuracies.new),
                harmonic: summarize(&of_row, |r| r.accuracies.harmonic),
                head: summarize(&of_row, |r| r.accuracies.head),
                tail: summarize(&of_row, |r| r.accuracies.tail),
            }
        })
        .collect();
    Ok(AblationTable { rows, cells })
}

// ---------------------------------------------------------------------------
// loss-weight sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WhichLambda {
    Tetf,
    Cc,
    Rs,
}

impl WhichLambda {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tetf" => Ok(WhichLambda::Tetf),
            "cc" => Ok(WhichLambda::Cc),
            "rs" => Ok(WhichLambda::Rs),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss weight {other:?}; expected tetf, cc or rs"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            WhichLambda::Tetf => "tetf",
            WhichLambda::Cc => "cc",
            WhichLambda::Rs => "rs",
        }
    }

    pub fn default_value(&self) -> f64 {
        let w = crate::losses::LossWeights::default();
        match self {
            WhichLambda::Tetf => w.lambda_tetf,
            WhichLambda::Cc => w.lambda_cc,
            WhichLambda::Rs => w.lambda_rs,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub harmonic: MetricSummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepCurve {
    pub which: WhichLambda,
    pub points: Vec<SweepPoint>,
    /// max - min of the seed-mean harmonic across the curve.
    pub spread: f64,
    /// Raised when the spread exceeds three accuracy points.
    pub spread_flag: bool,
    pub cells: Vec<Cell>,
}

/// Varies one coefficient while the other two stay at the configured
/// values.
pub fn run_sweep(
    task: &SyntheticTask,
    scaffold: &ClusterScaffold,
    cfg: &TrainConfig,
    which: WhichLambda,
    values: &[f64],
    seeds: &[u64],
) -> Result<SweepCurve> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let variants: Vec<(String, ClusterScaffold, TrainConfig)> = values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            match which {
                WhichLambda::Tetf => c.weights.lambda_tetf = v,
                WhichLambda::Cc => c.weights.lambda_cc = v,
                WhichLambda::Rs => c.weights.lambda_rs = v,
            }
            (format!("{}={v}", which.as_str()), scaffold.clone(), c)
        })
        .collect();
    let cells = run_grid(task, &variants, seeds)?;
    let points: Vec<SweepPoint> = variants
        .iter()
        .zip(values)
        .map(|((label, _, _), &value)| {
            let of_point: Vec<&RunReport> = cells
                .iter()
                .filter(|c| &c.variant == label)
                .map(|c| &c.report)
                .collect();
            SweepPoint {
                value,
                harmonic: summarize(&of_point, |r| r.accuracies.harmonic),
            }
        })
        .collect();
    let hs: Vec<f64> = points.iter().map(|p| p.harmonic.mean).collect();
    let spread =
        hs.iter().cloned().fold(f64::MIN, f64::max) - hs.iter().cloned().fold(f64::MAX, f64::min);
    Ok(SweepCurve {
        which,
        points,
        spread,
        spread_flag: spread > 3.0,
        cells,
    })
}

// ---------------------------------------------------------------------------
// seed stability
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct VariantStats {
    pub name: String,
    pub harmonic: MetricSummary,
    pub harmonic_raw: Vec<f64>,
    pub effective_rank: MetricSummary,
    pub effective_rank_raw: Vec<f64>,
    pub tetf_centered_final: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    pub variants: Vec<VariantStats>,
    pub cells: Vec<Cell>,
}

pub const STABILITY_STANDARD: &str = "standard";
pub const STABILITY_GLOBAL_ETF: &str = "global-etf";
pub const STABILITY_NO_RS: &str = "cpt-no-rs";
pub const STABILITY_FULL: &str = "cpt";

/// Four variants over the same seed grid: plain contrastive tuning, the
/// single-cluster (global) separation baseline, the full setup without the
/// anchor, and the full setup.
pub fn run_stability(
    task: &SyntheticTask,
    scaffold: &ClusterScaffold,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<StabilityReport> {
    if seeds.len() < 5 {
        return Err(Error::InvalidConfig(format!(
            "stability runs need at least 5 seeds, got {}",
            seeds.len()
        )));
    }
    let global = ClusterScaffold::global(&task.frozen_prototypes, scaffold.seed())?;
    let flags = |tetf, cc, rs| AblationFlags {
        use_clip: true,
        use_tetf: tetf,
        use_cc: cc,
        use_rs: rs,
    };
    let variants = vec![
        (
            STABILITY_STANDARD.to_string(),
            scaffold.clone(),
            cfg.with_flags(flags(false, false, false)),
        ),
        (
            STABILITY_GLOBAL_ETF.to_string(),
            global,
            cfg.with_flags(flags(true, false, false)),
        ),
        (
            STABILITY_NO_RS.to_string(),
            scaffold.clone(),
            cfg.with_flags(flags(true, true, false)),
        ),
        (
            STABILITY_FULL.to_string(),
            scaffold.clone(),
            cfg.with_flags(flags(true, true, true)),
        ),
    ];
    let cells = run_grid(task, &variants, seeds)?;
    let stats = variants
        .iter()
        .map(|(name, _, _)| {
            let of: Vec<&RunReport> = cells
                .iter()
                .filter(|c| &c.variant == name)
                .map(|c| &c.report)
                .collect();
            let harmonic_raw: Vec<f64> = of.iter().map(|r| r.accuracies.harmonic).collect();
            let rank_raw: Vec<f64> = of.iter().map(|r| r.geometry.effective_rank_after).collect();
            let centered: Vec<f64> = of
                .iter()
                .map(|r| r.per_epoch.last().map(|b| b.tetf_centered).unwrap_or(0.0))
                .collect();
            let (hm, hs) = mean_std(&harmonic_raw);
            let (rm, rs_) = mean_std(&rank_raw);
            VariantStats {
                name: name.clone(),
                harmonic: MetricSummary { mean: hm, std: hs },
                harmonic_raw,
                effective_rank: MetricSummary { mean: rm, std: rs_ },
                effective_rank_raw: rank_raw,
                tetf_centered_final: centered,
            }
        })
        .collect();
    Ok(StabilityReport {
        variants: stats,
        cells,
    })
}

impl StabilityReport {
    pub fn variant(&self, name: &str) -> Option<&VariantStats> {
        self.variants.iter().find(|v| v.name == name)
    }
}

// ---------------------------------------------------------------------------
// cluster-size sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ClusterSweepPoint {
    pub classes_per_cluster: usize,
    pub m: usize,
    pub harmonic: MetricSummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClusterSweep {
    pub points: Vec<ClusterSweepPoint>,
    pub skipped: Vec<(usize, String)>,
    pub cells: Vec<Cell>,
}

/// Sweeps the average classes-per-cluster target; each size maps to
/// `M = round(K / size)` clusters mined from the frozen prototypes.
/// Infeasible sizes are skipped with a note.
pub fn run_cluster_sweep(
    task: &SyntheticTask,
    cfg: &TrainConfig,
    per_cluster_sizes: &[usize],
    seeds: &[u64],
    scaffold_seed: u64,
) -> Result<ClusterSweep> {
    let k = task.num_classes();
    let mut variants = Vec::new();
    let mut meta = Vec::new();
    let mut skipped = Vec::new();
    for &size in per_cluster_sizes {
        if size == 0 || size > k {
            skipped.push((size, format!("size {size} infeasible for {k} classes")));
            continue;
        }
        let m = ((k as f64 / size as f64).round() as usize).clamp(1, k);
        let scaffold = kmeans_cosine(&task.frozen_prototypes, m, scaffold_seed)?;
        variants.push((format!("size={size}"), scaffold, cfg.clone()));
        meta.push((size, m));
    }
    if variants.is_empty() {
        return Err(Error::InvalidConfig(
            "no feasible cluster size in the sweep".into(),
        ));
    }
    let cells = run_grid(task, &variants, seeds)?;
    let points = variants
        .iter()
        .zip(meta)
        .map(|((label, _, _), (size, m))| {
            let of: Vec<&RunReport> = cells
                .iter()
                .filter(|c| &c.variant == label)
                .map(|c| &c.report)
                .collect();
            ClusterSweepPoint {
                classes_per_cluster: size,
                m,
                harmonic: summarize(&of, |r| r.accuracies.harmonic),
            }
        })
        .collect();
    Ok(ClusterSweep {
        points,
        skipped,
        cells,
    })
}

// ---------------------------------------------------------------------------
// clustering-algorithm ablation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ClusteringAblationRow {
    pub algorithm: ClusterAlgorithm,
    pub harmonic: MetricSummary,
    /// Partition agreement between the mined scaffold and the planted
    /// clusters (adjusted Rand index).
    pub planted_agreement: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClusteringAblation {
    pub rows: Vec<ClusteringAblationRow>,
    pub cells: Vec<Cell>,
}

/// Same cluster count and seed for every algorithm; training seeds vary per
/// cell.
pub fn run_clustering_ablation(
    task: &SyntheticTask,
    cfg: &TrainConfig,
    algorithms: &[ClusterAlgorithm],
    seeds: &[u64],
    m: usize,
    scaffold_seed: u64,
) -> Result<ClusteringAblation> {
    if algorithms.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut variants = Vec::new();
    let mut agreements = Vec::new();
    for &algorithm in algorithms {
        let scaffold = match algorithm {
            ClusterAlgorithm::KMeansCosine => {
                kmeans_cosine(&task.frozen_prototypes, m, scaffold_seed)?
            }
            ClusterAlgorithm::KMeansEuclidean => {
                kmeans_euclidean(&task.frozen_prototypes, m, scaffold_seed)?
            }
            ClusterAlgorithm::KMedoidsCosine => {
                kmedoids_cosine(&task.frozen_prototypes, m, scaffold_seed)?
            }
        };
        agreements.push(adjusted_rand_index(
            &task.planted_clusters,
            scaffold.mapping(),
        ));
        variants.push((algorithm.as_str().to_string(), scaffold, cfg.clone()));
    }
    let cells = run_grid(task, &variants, seeds)?;
    let rows = algorithms
        .iter()
        .zip(agreements)
        .map(|(&algorithm, planted_agreement)| {
            let label = algorithm.as_str();
            let of: Vec<&RunReport> = cells
                .iter()
                .filter(|c| c.variant == label)
                .map(|c| &c.report)
                .collect();
            ClusteringAblationRow {
                algorithm,
                harmonic: summarize(&of, |r| r.accuracies.harmonic),
                planted_agreement,
            }
        })
        .collect();
    Ok(ClusteringAblation { rows, cells })
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

const CELL_HEADER: [&str; 11] = [
    "variant",
    "seed",
    "config_hash",
    "base_acc",
    "new_acc",
    "harmonic",
    "head_acc",
    "tail_acc",
    "intra_spread",
    "effective_rank",
    "centroid_drift",
];

fn cell_rows(cells: &[Cell]) -> Vec<Vec<String>> {
    let mut sorted: Vec<&Cell> = cells.iter().collect();
    sorted.sort_by(|a, b| a.variant.cmp(&b.variant).then(a.seed.cmp(&b.seed)));
    sorted
        .iter()
        .map(|c| {
            vec![
                c.variant.clone(),
                c.seed.to_string(),
                c.report.config_hash.clone(),
                fmt_pct(c.report.accuracies.base),
                fmt_pct(c.report.accuracies.new),
                fmt_pct(c.report.accuracies.harmonic),
                fmt_pct(c.report.accuracies.head),
                fmt_pct(c.report.accuracies.tail),
                fmt_val(c.report.geometry.intra_class_spread),
                fmt_val(c.report.geometry.effective_rank_after),
                fmt_val(c.report.geometry.centroid_drift),
            ]
        })
        .collect()
}

/// Writes `cells.csv` (one row per `(variant, seed)`) and `summary.csv`
/// (seed-aggregated means and stds per variant) into `dir`.
pub fn write_cell_csvs(dir: &Path, cells: &[Cell], config_hash: &str) -> Result<()> {
    write_csv(&dir.join("cells.csv"), &CELL_HEADER, &cell_rows(cells))?;

    let mut variants: Vec<String> = cells.iter().map(|c| c.variant.clone()).collect();
    variants.sort();
    variants.dedup();
    let header = [
        "variant",
        "n_seeds",
        "config_hash",
        "base_mean",
        "base_std",
        "new_mean",
        "new_std",
        "harmonic_mean",
        "harmonic_std",
        "head_mean",
        "head_std",
        "tail_mean",
        "tail_std",
        "effective_rank_mean",
    ];
    let rows: Vec<Vec<String>> = variants
        .iter()
        .map(|v| {
            let of: Vec<&RunReport> = cells
                .iter()
                .filter(|c| &c.variant == v)
                .map(|c| &c.report)
                .collect();
            let s = |f: &dyn Fn(&RunReport) -> f64| {
                let xs: Vec<f64> = of.iter().map(|r| f(r)).collect();
                mean_std(&xs)
            };
            let base = s(&|r| r.accuracies.base);
            let new = s(&|r| r.accuracies.new);
            let h = s(&|r| r.accuracies.harmonic);
            let head = s(&|r| r.accuracies.head);
            let tail = s(&|r| r.accuracies.tail);
            let rank = s(&|r| r.geometry.effective_rank_after);
            vec![
                v.clone(),
                of.len().to_string(),
                config_hash.to_string(),
                fmt_pct(base.0),
                fmt_pct(base.1),
                fmt_pct(new.0),
                fmt_pct(new.1),
                fmt_pct(h.0),
                fmt_pct(h.1),
                fmt_pct(head.0),
                fmt_pct(head.1),
                fmt_pct(tail.0),
                fmt_pct(tail.1),
                fmt_val(rank.0),
            ]
        })
        .collect();
    write_csv(&dir.join("summary.csv"), &header, &rows)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_task, TaskParams};

    fn quick_task() -> SyntheticTask {
        generate_task(&TaskParams {
            m_planted: 2,
            classes_per_cluster: 2,
            dim: 8,
            intra_cluster_angle_deg: 20.0,
            feature_noise: 0.15,
            prototype_noise: 0.05,
            tau: 0.25,
            n_max: 4,
            test_per_class: 6,
            seed: 3,
            text_compression: 1.0,
        })
        .unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ablation_emits_five_rows_and_lr0_zero_collapses_them() {
        let task = quick_task();
        let scaffold = kmeans_cosine(&task.frozen_prototypes, 2, 1).unwrap();
        let cfg = TrainConfig {
            lr0: 0.0,
            init_noise: 0.0,
            ..quick_cfg()
        };
        let table = run_ablation(&task, &scaffold, &cfg, &[1, 2]).unwrap();
        assert_eq!(table.rows.len(), 5);
        // with no learning every row is the zero-shot baseline
        let h0 = table.rows[0].harmonic.mean;
        for row in &table.rows {
            assert!((row.harmonic.mean - h0).abs() < 1e-9, "{}", row.label);
        }
    }

    #[test]
    fn sweep_single_value_matches_direct_run() {
        let task = quick_task();
        let scaffold = kmeans_cosine(&task.frozen_prototypes, 2, 1).unwrap();
        let cfg = quick_cfg();
        let curve = run_sweep(&task, &scaffold, &cfg, WhichLambda::Tetf, &[0.25], &[7]).unwrap();
        assert_eq!(curve.points.len(), 1);
        let (_, direct) = train(&task, &scaffold, &cfg.with_seed(7)).unwrap();
        assert_eq!(curve.points[0].harmonic.mean, direct.accuracies.harmonic);
        assert_eq!(curve.spread, 0.0);
        assert!(!curve.spread_flag);
    }

    #[test]
    fn sweep_includes_default_point_consistently() {
        let task = quick_task();
        let scaffold = kmeans_cosine(&task.frozen_prototypes, 2, 1).unwrap();
        let cfg = quick_cfg();
        let dflt = WhichLambda::Cc.default_value();
        let curve = run_sweep(
            &task,
            &scaffold,
            &cfg,
            WhichLambda::Cc,
            &[dflt * 0.5, dflt, dflt * 2.0],
            &[3],
        )
        .unwrap();
        let (_, direct) = train(&task, &scaffold, &cfg.with_seed(3)).unwrap();
        assert_eq!(curve.points[1].harmonic.mean, direct.accuracies.harmonic);
    }

    #[test]
    fn stability_requires_five_seeds_and_repeated_seed_has_zero_std() {
        let task = quick_task();
        let scaffold = kmeans_cosine(&task.frozen_prototypes, 2, 1).unwrap();
        let cfg = quick_cfg();
        assert!(run_stability(&task, &scaffold, &cfg, &[1, 2]).is_err());
        let rep = run_stability(&task, &scaffold, &cfg, &[5, 5, 5, 5, 5]).unwrap();
        for v in &rep.variants {
            assert!(
                v.harmonic.std.abs() < 1e-12,
                "{}: {}",
                v.name,
                v.harmonic.std
            );
        }
        assert_eq!(rep.variants.len(), 4);
    }

    #[test]
    fn cluster_sweep_size_k_is_global_and_size_one_all_singletons() {
        let task = quick_task();
        let k = task.num_classes();
        let cfg = quick_cfg();
        let sweep = run_cluster_sweep(&task, &cfg, &[1, 2, k, k + 5], &[1], 9).unwrap();
        assert_eq!(sweep.skipped.len(), 1); // k+5 infeasible
        assert_eq!(sweep.points.len(), 3);
        let size_k = sweep
            .points
            .iter()
            .find(|p| p.classes_per_cluster == k)
            .unwrap();
        assert_eq!(size_k.m, 1, "one cluster = the global variant");
        let size_1 = sweep
            .points
            .iter()
            .find(|p| p.classes_per_cluster == 1)
            .unwrap();
        assert_eq!(size_1.m, k, "all singletons");
    }

    #[test]
    fn clustering_ablation_one_row_per_algorithm() {
        let task = quick_task();
        let cfg = quick_cfg();
        let algos = [
            ClusterAlgorithm::KMeansCosine,
            ClusterAlgorithm::KMeansEuclidean,
            ClusterAlgorithm::KMedoidsCosine,
        ];
        let out = run_clustering_ablation(&task, &cfg, &algos, &[1, 2], 2, 4).unwrap();
        assert_eq!(out.rows.len(), 3);
        // clean-ish planted task: cosine agreement at least Euclidean's
        let cos = out.rows[0].planted_agreement;
        let euc = out.rows[1].planted_agreement;
        assert!(cos >= euc - 1e-12, "cosine {cos} vs euclidean {euc}");
    }

    #[test]
    fn clustering_ablation_identical_prototypes_degenerate() {
        // identical prototypes: every algorithm collapses to the same
        // single-cluster scaffold, so trained accuracy matches exactly
        let mut task = quick_task();
        let row = task.frozen_prototypes.row(0).to_vec();
        let k = task.frozen_prototypes.len();
        let labels = task.frozen_prototypes.labels().to_vec();
        task.frozen_prototypes = crate::embedding::EmbeddingMatrix::new(
            labels,
            crate::matrix::Matrix::from_rows(&vec![row; k]).unwrap(),
        )
        .unwrap();
        let algos = [
            ClusterAlgorithm::KMeansCosine,
            ClusterAlgorithm::KMeansEuclidean,
            ClusterAlgorithm::KMedoidsCosine,
        ];
        let out = run_clustering_ablation(&task, &quick_cfg(), &algos, &[1], 1, 2).unwrap();
        let h0 = out.rows[0].harmonic.mean;
        for r in &out.rows {
            assert_eq!(r.harmonic.mean, h0, "{:?}", r.algorithm);
        }
    }

    #[test]
    fn csv_emission_is_deterministic() {
        let task = quick_task();
        let scaffold = kmeans_cosine(&task.frozen_prototypes, 2, 1).unwrap();
        let cfg = TrainConfig {
            lr0: 0.001,
            ..quick_cfg()
        };
        let table = run_ablation(&task, &scaffold, &cfg, &[1, 2]).unwrap();
        let dir = std::env::temp_dir().join("cpt_runner_csv");
        write_cell_csvs(&dir, &table.cells, "deadbeef").unwrap();
        let first = std::fs::read(dir.join("summary.csv")).unwrap();
        write_cell_csvs(&dir, &table.cells, "deadbeef").unwrap();
        assert_eq!(first, std::fs::read(dir.join("summary.csv")).unwrap());
    }

    #[test]
    fn effective_rank_is_populated_for_stability_variants() {
        let task = quick_task();
        let scaffold = kmeans_cosine(&task.frozen_prototypes, 2, 1).unwrap();
        let cfg = quick_cfg();
        let rep = run_stability(&task, &scaffold, &cfg, &[1, 2, 3, 4, 5]).unwrap();
        let full = rep.variant(STABILITY_FULL).unwrap();
        assert_eq!(full.effective_rank_raw.len(), 5);
        for &r in &full.effective_rank_raw {
            assert!(r >= 1.0 && r <= task.num_classes() as f64);
        }
    }
}
