//! Library side of the `zopro` command: train, analyze, grid, compare.
//!
//! Every command writes into its own output directory and returns a value the
//! binary turns into an exit status.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{self, AnalyticsReport};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::optim::Method;
use crate::rundir::{RunManifest, RunReader, RunStatus, RunWriter};
use crate::training::{compare_methods, run_experiment, Comparison, RefineStatus, TrajectoryLog};

/// Mean-reward drop (below the starting value) that marks a run as collapsed.
pub const COLLAPSE_DROP: f64 = 1.0;

/// Result of one training run that got as far as creating its directory.
#[derive(Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    /// Completed iterations (all of them on success).
    pub log: Option<TrajectoryLog>,
    pub error: Option<Error>,
}

impl TrainOutcome {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed_override {
        cfg.override_seeds(seed);
    }
    Ok(cfg)
}

/// Runs the full loop for `cfg` and persists it under `out_dir`.
///
/// Run failures are reported in the outcome with the partial artifacts on
/// disk; only failures to write the directory itself are returned as `Err`.
pub fn train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut writer = RunWriter::create(out_dir, cfg)?;
    match run_experiment(cfg) {
        Ok(log) => {
            writer.write_trajectory(&log)?;
            let manifest = writer.finish(RunStatus::Completed, None)?;
            Ok(TrainOutcome {
                dir: out_dir.to_path_buf(),
                manifest,
                log: Some(log),
                error: None,
            })
        }
        Err(failure) => {
            if let Some(log) = &failure.log {
                writer.write_trajectory(log)?;
            }
            if let Error::ObjectiveDivergence { params, .. } = &failure.error {
                writer.write_divergence(params, &cfg.layout()?, cfg.seed_init)?;
            }
            let manifest = writer.finish(RunStatus::Failed, Some(failure.error.to_string()))?;
            Ok(TrainOutcome {
                dir: out_dir.to_path_buf(),
                manifest,
                log: failure.log.map(|b| *b),
                error: Some(failure.error),
            })
        }
    }
}

pub fn cmd_train(config_path: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<TrainOutcome> {
    let cfg = load_config(config_path, seed_override)?;
    train(&cfg, out_dir)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Reads a run directory and writes `report.json` plus `plotdata/*.csv`.
pub fn cmd_analyze(run_dir: &Path, out_dir: &Path) -> Result<AnalyticsReport> {
    let run = RunReader::open(run_dir)?;
    let (policy, reward) = run.series()?;
    let layers = run.config.layout()?.layers();
    let report = analysis::analyze(&policy, &reward, &layers)?;

    let plot = out_dir.join("plotdata");
    fs::create_dir_all(&plot)?;
    fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;

    let mut angles = csv::Writer::from_path(plot.join("angles.csv"))?;
    angles.write_record(["tag", "relative_angle_deg"])?;
    for v in &report.relative_angle_deg {
        angles.write_record([v.tag.to_string(), opt(v.value)])?;
    }
    angles.flush()?;

    let mut corr = csv::Writer::from_path(plot.join("correlations.csv"))?;
    corr.write_record(["tag", "procrustes_disparity", "distance_correlation", "pearson_delta_corr"])?;
    for ((pd, d), p) in report
        .procrustes_disparity
        .iter()
        .zip(&report.distance_correlation)
        .zip(&report.pearson_delta_corr)
    {
        corr.write_record([d.tag.to_string(), opt(pd.value), opt(d.value), opt(p.value)])?;
    }
    corr.flush()?;

    let mut layer = csv::Writer::from_path(plot.join("layerwise_angles.csv"))?;
    let mut header = vec!["tag".to_string()];
    header.extend(report.layers.iter().cloned());
    header.push("global".into());
    layer.write_record(&header)?;
    for row in &report.layerwise_angles {
        let mut rec = vec![row.tag.to_string()];
        rec.extend(row.angles.iter().map(|a| opt(*a)));
        rec.push(opt(row.global));
        layer.write_record(&rec)?;
    }
    layer.flush()?;

    let mut traj = csv::Writer::from_path(plot.join("trajectory_pca.csv"))?;
    traj.write_record(["series", "tag", "pc1", "pc2"])?;
    if let Some(pca) = &report.pca {
        let labels = [policy.label(), reward.label()];
        let rows = labels.iter().flat_map(|l| report.tags.iter().map(move |t| (*l, *t)));
        for ((label, tag), c) in rows.zip(&pca.coords) {
            traj.write_record([
                label.to_string(),
                tag.to_string(),
                opt(c.first().copied()),
                opt(c.get(1).copied()),
            ])?;
        }
    }
    traj.flush()?;
    Ok(report)
}

/// One row of `grid.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub eta: f64,
    pub epsilon: f64,
    /// Final minus initial mean reward (over completed iterations).
    pub final_reward_delta: f64,
    pub collapsed_flag: bool,
}

pub fn grid_dir_name(eta: f64, epsilon: f64) -> String {
    format!("eta_{eta:e}_eps_{epsilon:e}")
}

/// A run is collapsed when it aborted, tripped the divergence guard, lost
/// more than [`COLLAPSE_DROP`] mean reward, or its policy became so peaked
/// that an iteration produced no usable preference pairs.
pub fn grid_row(eta: f64, epsilon: f64, outcome: &TrainOutcome) -> GridRow {
    let (delta, degenerate) = match &outcome.log {
        Some(log) => (
            log.final_mean_reward() - log.initial_mean_reward,
            log.guard_tripped()
                || log
                    .iterations
                    .iter()
                    .any(|it| matches!(it.refine, RefineStatus::NoData | RefineStatus::NonFinite)),
        ),
        None => (f64::NAN, false),
    };
    GridRow {
        eta,
        epsilon,
        final_reward_delta: delta,
        collapsed_flag: !outcome.succeeded() || degenerate || !delta.is_finite() || delta < -COLLAPSE_DROP,
    }
}

/// One sub-run per (eta, epsilon) pair, run in parallel; rows come back in
/// eta-major order regardless of scheduling.
pub fn grid(base: &ExperimentConfig, etas: &[f64], epsilons: &[f64], out_dir: &Path) -> Result<Vec<GridRow>> {
    if etas.is_empty() || epsilons.is_empty() {
        return Err(Error::InvalidArgument("grid needs nonempty eta and epsilon lists".into()));
    }
    let mut jobs = Vec::new();
    for &eta in etas {
        for &epsilon in epsilons {
            let cfg = ExperimentConfig {
                eta,
                epsilon,
                ..base.clone()
            };
            cfg.validate()?;
            jobs.push((eta, epsilon, cfg));
        }
    }
    fs::create_dir_all(out_dir)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut results: Vec<Option<Result<GridRow>>> = (0..jobs.len()).map(|_| None).collect();
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some((eta, epsilon, cfg)) = jobs.get(i) else { break };
                let dir = out_dir.join(grid_dir_name(*eta, *epsilon));
                let row = train(cfg, &dir).map(|o| grid_row(*eta, *epsilon, &o));
                slots.lock().expect("grid worker panicked")[i] = Some(row);
            });
        }
    });
    let rows = results
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(out_dir.join("grid.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn cmd_grid(
    config_path: &Path,
    etas: &[f64],
    epsilons: &[f64],
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<Vec<GridRow>> {
    let cfg = load_config(config_path, seed_override)?;
    grid(&cfg, etas, epsilons, out_dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CompareRow {
    method: String,
    step: usize,
    evaluations: usize,
    wall_ms: f64,
    mean_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub initial_mean_reward: f64,
    pub final_mean_reward: f64,
    pub evaluations: usize,
    pub evaluations_to_threshold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub threshold: Option<f64>,
    pub methods: Vec<MethodSummary>,
}

impl CompareSummary {
    pub fn from_comparison(cmp: &Comparison) -> Self {
        Self {
            threshold: cmp.threshold,
            methods: cmp
                .traces
                .iter()
                .map(|t| MethodSummary {
                    method: t.method,
                    initial_mean_reward: t.initial_mean_reward,
                    final_mean_reward: t.final_mean_reward(),
                    evaluations: t.points.last().map_or(0, |p| p.0),
                    evaluations_to_threshold: cmp.threshold.and_then(|th| t.evaluations_to(th)),
                })
                .collect(),
        }
    }
}

/// Runs each method from the same post-warm-up state and writes
/// `compare.csv` and `compare.json`.
pub fn compare(cfg: &ExperimentConfig, methods: &[Method], out_dir: &Path) -> Result<Comparison> {
    let cmp = compare_methods(cfg, methods)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;
    let mut w = csv::Writer::from_path(out_dir.join("compare.csv"))?;
    for t in &cmp.traces {
        w.serialize(CompareRow {
            method: t.method.name().to_string(),
            step: 0,
            evaluations: 0,
            wall_ms: 0.0,
            mean_reward: t.initial_mean_reward,
        })?;
        for (i, &(evaluations, wall_ms, mean_reward)) in t.points.iter().enumerate() {
            w.serialize(CompareRow {
                method: t.method.name().to_string(),
                step: i + 1,
                evaluations,
                wall_ms,
                mean_reward,
            })?;
        }
    }
    w.flush()?;
    let summary = CompareSummary::from_comparison(&cmp);
    fs::write(out_dir.join("compare.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(cmp)
}

pub fn cmd_compare(
    config_path: &Path,
    methods: &[Method],
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<Comparison> {
    let cfg = load_config(config_path, seed_override)?;
    compare(&cfg, methods, out_dir)
}

/// Parses a comma-separated list such as `1e-3,1e-4`.
pub fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| Error::InvalidArgument(format!("cannot parse `{s}`: {e}")))
        })
        .collect()
}
