//! `cpt` — experiment harness for cluster-aware prototype tuning.
//!
//! Every subcommand reads a JSON config (four blocks: task, scaffold,
//! train, weights; all optional) plus flag overrides, and writes its
//! artifacts under `--out`. Exit codes: 0 success, 2 invalid config,
//! 3 numerical divergence, 4 property-check failure in `--assert` mode.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use cpt_core::config::ExperimentConfig;
use cpt_core::metrics::config_hash;
use cpt_core::report::{fmt_pct, fmt_val, write_csv, write_json};
use cpt_core::runners::{
    run_ablation, run_cluster_sweep, run_clustering_ablation, run_stability, run_sweep,
    write_cell_csvs, WhichLambda, STABILITY_FULL, STABILITY_GLOBAL_ETF, STABILITY_NO_RS,
};
use cpt_core::scaffold::{cosine_silhouette, ClusterAlgorithm, ClusterScaffold};
use cpt_core::synth::{generate_task, SyntheticTask};
use cpt_core::trainer::train;
use cpt_core::Error as CoreError;

#[derive(Parser)]
#[command(
    name = "cpt",
    version,
    about = "Cluster-aware prototype tuning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file; omitted means built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for reports and CSVs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the base training seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Number of replicate seeds (base, base+1, ...).
    #[arg(long, global = true, default_value_t = 10)]
    seeds: usize,

    /// Reuse a task directory written by `gen-task` instead of generating.
    #[arg(long, global = true)]
    task: Option<PathBuf>,

    /// Reuse a scaffold JSON written by `cluster` instead of mining one.
    #[arg(long, global = true)]
    scaffold: Option<PathBuf>,

    /// Rayon worker threads (0 = library default). Output is identical
    /// regardless of this value.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Check the run's headline property and exit 4 if it fails.
    #[arg(long = "assert", global = true, default_value_t = false)]
    assert_mode: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed task directory.
    GenTask,
    /// Mine (or select) the frozen cluster scaffold and write it as JSON.
    Cluster,
    /// One training run: report JSON plus a prototype checkpoint CSV.
    Train,
    /// The five-row component ablation over replicate seeds.
    Ablate,
    /// Vary one loss weight while fixing the other two.
    Sweep {
        /// Which coefficient to vary: tetf, cc or rs.
        #[arg(long)]
        which: String,
        /// Explicit weight values; default is {0.5x, 1x, 2x} of the default.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Seed-stability comparison across the four standard variants.
    Stability,
    /// Sweep the average classes-per-cluster of the mined scaffold.
    ClusterSweep {
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
        sizes: Vec<usize>,
    },
    /// Compare clustering algorithms behind the same scaffold contract.
    ClusterAblate {
        /// Comma-separated subset of: kmeans-cosine, kmeans-euclidean,
        /// kmedoids-cosine.
        #[arg(long, value_delimiter = ',')]
        algos: Option<Vec<String>>,
    },
}

enum CliError {
    Invalid(String),
    Divergence(String),
    AssertFailed(String),
    Other(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::DivergenceDetected { .. } => CliError::Divergence(e.to_string()),
            CoreError::Io(_) => CliError::Other(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    config: &'a ExperimentConfig,
    config_hash: String,
    seeds: &'a [u64],
    result: T,
}

fn write_artifact<T: Serialize>(
    out: &Path,
    cfg: &ExperimentConfig,
    seeds: &[u64],
    result: T,
) -> Result<String, CliError> {
    let hash = config_hash(cfg)?;
    write_json(
        &out.join("report.json"),
        &Artifact {
            config: cfg,
            config_hash: hash.clone(),
            seeds,
            result,
        },
    )?;
    Ok(hash)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn load_task(cli: &Cli, cfg: &ExperimentConfig) -> Result<SyntheticTask, CliError> {
    match &cli.task {
        Some(dir) => Ok(SyntheticTask::load_dir(dir)?),
        None => Ok(generate_task(&cfg.task)?),
    }
}

fn load_scaffold(
    cli: &Cli,
    cfg: &ExperimentConfig,
    task: &SyntheticTask,
) -> Result<ClusterScaffold, CliError> {
    match &cli.scaffold {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
            Ok(ClusterScaffold::from_json(&text)?)
        }
        None => Ok(cfg.scaffold.build(&task.frozen_prototypes)?),
    }
}

fn seed_grid(cli: &Cli, cfg: &ExperimentConfig) -> Vec<u64> {
    let base = cfg.train.seed;
    (0..cli.seeds.max(1) as u64).map(|i| base + i).collect()
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    fs::create_dir_all(out).map_err(|e| CliError::Other(e.to_string()))?;

    match &cli.command {
        Command::GenTask => {
            let task = load_task(cli, &cfg)?;
            task.save_dir(out)?;
            write_json(&out.join("config.json"), &cfg)?;
            println!(
                "task: {} classes in {} planted clusters, dim {}, tau {}, train pool {}",
                task.num_classes(),
                cfg.task.m_planted,
                task.dim(),
                task.tau,
                task.counts.values().sum::<usize>()
            );
        }
        Command::Cluster => {
            let task = load_task(cli, &cfg)?;
            let scaffold = load_scaffold(cli, &cfg, &task)?;
            fs::write(out.join("scaffold.json"), scaffold.to_json()?)
                .map_err(|e| CliError::Other(e.to_string()))?;
            let silhouette = if scaffold.m() >= 2 {
                cosine_silhouette(&task.frozen_prototypes, &scaffold)?
            } else {
                0.0
            };
            println!(
                "scaffold: {} clusters over {} classes via {}, cosine silhouette {silhouette:.4}",
                scaffold.m(),
                scaffold.len_classes(),
                scaffold.algorithm().as_str()
            );
        }
        Command::Train => {
            let task = load_task(cli, &cfg)?;
            let scaffold = load_scaffold(cli, &cfg, &task)?;
            let train_cfg = cfg.train_config();
            let (state, report) = train(&task, &scaffold, &train_cfg)?;
            let seeds = [train_cfg.seed];
            write_artifact(out, &cfg, &seeds, &report)?;
            state.prototypes.write_csv(&out.join("checkpoint.csv"))?;
            println!(
                "train: seed {} H={:.2} (base {:.2}, new {:.2}), tail {:.2}, {} steps",
                train_cfg.seed,
                report.accuracies.harmonic,
                report.accuracies.base,
                report.accuracies.new,
                report.accuracies.tail,
                state.step
            );
        }
        Command::Ablate => {
            let task = load_task(cli, &cfg)?;
            let scaffold = load_scaffold(cli, &cfg, &task)?;
            let seeds = seed_grid(cli, &cfg);
            let table = run_ablation(&task, &scaffold, &cfg.train_config(), &seeds)?;
            let hash = write_artifact(out, &cfg, &seeds, &table)?;
            write_cell_csvs(out, &table.cells, &hash)?;
            for row in &table.rows {
                println!(
                    "{:<16} H={:6.2}±{:4.2}  tail={:6.2}±{:4.2}",
                    row.label, row.harmonic.mean, row.harmonic.std, row.tail.mean, row.tail.std
                );
            }
            if cli.assert_mode {
                let t = |i: usize| table.rows[i].tail.mean;
                if !(t(4) >= t(1) && t(1) >= t(0)) {
                    return Err(CliError::AssertFailed(format!(
                        "tail ordering violated: row5 {:.2}, row2 {:.2}, row1 {:.2}",
                        t(4),
                        t(1),
                        t(0)
                    )));
                }
                println!("assert: tail ordering holds");
            }
        }
        Command::Sweep { which, values } => {
            let which = WhichLambda::parse(which)?;
            let task = load_task(cli, &cfg)?;
            let scaffold = load_scaffold(cli, &cfg, &task)?;
            let seeds = seed_grid(cli, &cfg);
            let default = which.default_value();
            let values = values
                .clone()
                .unwrap_or_else(|| vec![0.5 * default, default, 2.0 * default]);
            let curve = run_sweep(
                &task,
                &scaffold,
                &cfg.train_config(),
                which,
                &values,
                &seeds,
            )?;
            let hash = write_artifact(out, &cfg, &seeds, &curve)?;
            write_cell_csvs(out, &curve.cells, &hash)?;
            let rows: Vec<Vec<String>> = curve
                .points
                .iter()
                .map(|p| {
                    vec![
                        which.as_str().to_string(),
                        fmt_val(p.value),
                        fmt_pct(p.harmonic.mean),
                        fmt_pct(p.harmonic.std),
                    ]
                })
                .collect();
            write_csv(
                &out.join("points.csv"),
                &["which", "value", "h_mean", "h_std"],
                &rows,
            )?;
            println!(
                "sweep {}: spread {:.3} points over {:?}{}",
                which.as_str(),
                curve.spread,
                values,
                if curve.spread_flag {
                    "  [flagged > 3]"
                } else {
                    ""
                }
            );
            if cli.assert_mode && curve.spread_flag {
                return Err(CliError::AssertFailed(format!(
                    "harmonic-mean spread {:.3} exceeds 3 points",
                    curve.spread
                )));
            }
        }
        Command::Stability => {
            let task = load_task(cli, &cfg)?;
            let scaffold = load_scaffold(cli, &cfg, &task)?;
            let seeds = seed_grid(cli, &cfg);
            let report = run_stability(&task, &scaffold, &cfg.train_config(), &seeds)?;
            let hash = write_artifact(out, &cfg, &seeds, &report)?;
            write_cell_csvs(out, &report.cells, &hash)?;
            let rows: Vec<Vec<String>> = report
                .variants
                .iter()
                .map(|v| {
                    vec![
                        v.name.clone(),
                        fmt_pct(v.harmonic.mean),
                        fmt_pct(v.harmonic.std),
                        fmt_val(v.effective_rank.mean),
                        fmt_val(v.effective_rank.std),
                    ]
                })
                .collect();
            write_csv(
                &out.join("variants.csv"),
                &["variant", "h_mean", "h_std", "rank_mean", "rank_std"],
                &rows,
            )?;
            for v in &report.variants {
                println!(
                    "{:<12} H={:6.2}±{:5.3}  rank={:6.2}",
                    v.name, v.harmonic.mean, v.harmonic.std, v.effective_rank.mean
                );
            }
            if cli.assert_mode {
                let full = report.variant(STABILITY_FULL).unwrap();
                let no_rs = report.variant(STABILITY_NO_RS).unwrap();
                let global = report.variant(STABILITY_GLOBAL_ETF).unwrap();
                let ratio = full.harmonic.std / no_rs.harmonic.std;
                let mut failures = Vec::new();
                if ratio > 0.75 {
                    failures.push(format!("std ratio {ratio:.3} > 0.75"));
                }
                let rank_ok = full
                    .effective_rank_raw
                    .iter()
                    .zip(&global.effective_rank_raw)
                    .all(|(c, g)| c >= g);
                if !rank_ok {
                    failures.push("global variant exceeded the clustered rank".to_string());
                }
                if !failures.is_empty() {
                    return Err(CliError::AssertFailed(failures.join("; ")));
                }
                println!("assert: stability properties hold (ratio {ratio:.3})");
            }
        }
        Command::ClusterSweep { sizes } => {
            let task = load_task(cli, &cfg)?;
            let seeds = seed_grid(cli, &cfg);
            let sweep =
                run_cluster_sweep(&task, &cfg.train_config(), sizes, &seeds, cfg.scaffold.seed)?;
            let hash = write_artifact(out, &cfg, &seeds, &sweep)?;
            write_cell_csvs(out, &sweep.cells, &hash)?;
            let rows: Vec<Vec<String>> = sweep
                .points
                .iter()
                .map(|p| {
                    vec![
                        p.classes_per_cluster.to_string(),
                        p.m.to_string(),
                        fmt_pct(p.harmonic.mean),
                        fmt_pct(p.harmonic.std),
                    ]
                })
                .collect();
            write_csv(
                &out.join("points.csv"),
                &["classes_per_cluster", "m", "h_mean", "h_std"],
                &rows,
            )?;
            for (size, reason) in &sweep.skipped {
                eprintln!("skipped size {size}: {reason}");
            }
            for p in &sweep.points {
                println!(
                    "size {:>3} (M = {:>2}): H = {:.2} ± {:.2}",
                    p.classes_per_cluster, p.m, p.harmonic.mean, p.harmonic.std
                );
            }
        }
        Command::ClusterAblate { algos } => {
            let algorithms: Vec<ClusterAlgorithm> = match algos {
                None => vec![
                    ClusterAlgorithm::KMeansCosine,
                    ClusterAlgorithm::KMeansEuclidean,
                    ClusterAlgorithm::KMedoidsCosine,
                ],
                Some(names) => names
                    .iter()
                    .map(|n| match n.as_str() {
                        "kmeans-cosine" => Ok(ClusterAlgorithm::KMeansCosine),
                        "kmeans-euclidean" => Ok(ClusterAlgorithm::KMeansEuclidean),
                        "kmedoids-cosine" => Ok(ClusterAlgorithm::KMedoidsCosine),
                        other => Err(CliError::Invalid(format!(
                            "unknown clustering algorithm {other:?}"
                        ))),
                    })
                    .collect::<Result<_, _>>()?,
            };
            let task = load_task(cli, &cfg)?;
            let seeds = seed_grid(cli, &cfg);
            let m = cfg
                .scaffold
                .m
                .unwrap_or_else(|| ClusterScaffold::default_m(task.num_classes()));
            let table = run_clustering_ablation(
                &task,
                &cfg.train_config(),
                &algorithms,
                &seeds,
                m,
                cfg.scaffold.seed,
            )?;
            let hash = write_artifact(out, &cfg, &seeds, &table)?;
            write_cell_csvs(out, &table.cells, &hash)?;
            let rows: Vec<Vec<String>> = table
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.algorithm.as_str().to_string(),
                        fmt_pct(r.harmonic.mean),
                        fmt_pct(r.harmonic.std),
                        fmt_val(r.planted_agreement),
                    ]
                })
                .collect();
            write_csv(
                &out.join("table.csv"),
                &["algorithm", "h_mean", "h_std", "planted_agreement"],
                &rows,
            )?;
            for r in &table.rows {
                println!(
                    "{:<18} H = {:.2} ± {:.2}  planted agreement {:.3}",
                    r.algorithm.as_str(),
                    r.harmonic.mean,
                    r.harmonic.std,
                    r.planted_agreement
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let body = || run(&cli);
    let outcome = if cli.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build();
        match pool {
            Ok(pool) => pool.install(body),
            Err(e) => Err(CliError::Other(e.to_string())),
        }
    } else {
        body()
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Divergence(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::AssertFailed(msg)) => {
            eprintln!("assert failed: {msg}");
            ExitCode::from(4)
        }
        Err(CliError::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
