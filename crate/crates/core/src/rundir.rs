//! On-disk layout of a training run.
//!
//! ```text
//! <run>/config.toml
//! <run>/manifest.json
//! <run>/metrics.csv
//! <run>/iterations.csv
//! <run>/log.txt
//! <run>/records/iter_001.txt ...
//! <run>/checkpoints/policy_t001.ckpt, reward_t001.ckpt ...
//! <run>/checkpoints/snapshots/policy_t001_s0020.ckpt ...
//! <run>/checkpoints/diverged.ckpt          (only after a divergence)
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::analysis::CheckpointSeries;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::models::{MlpLayout, MlpPolicy, RewardModel};
use crate::objectives::{read_records, write_records, PreferenceRecord};
use crate::training::{IterationLog, TrajectoryLog};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const LOG_FILE: &str = "log.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub init: u64,
    pub env: u64,
    pub rollout: u64,
    pub judge: u64,
    pub noise: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of `config.toml` as written.
    pub config_hash: String,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub seeds: SeedRecord,
    pub status: RunStatus,
    pub iterations_completed: usize,
    pub error: Option<String>,
}

/// Row of `iterations.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_score: f64,
    pub judge_agreement: f64,
    pub delta_pi_norm: f64,
    pub delta_r_norm: f64,
    pub delta_pi_cosine: Option<f64>,
    pub refine_status: String,
    pub records: usize,
    pub ties: usize,
    pub guard_skips: usize,
}

impl IterationRow {
    pub fn from_log(it: &IterationLog) -> Self {
        Self {
            iteration: it.iteration,
            mean_reward: it.mean_reward,
            mean_score: it.mean_score,
            judge_agreement: it.judge_agreement,
            delta_pi_norm: it.delta_pi.norm(),
            delta_r_norm: it.delta_r.norm(),
            delta_pi_cosine: it.delta_pi_cosine,
            refine_status: it.refine.label().to_string(),
            records: it.records.len(),
            ties: it.records.iter().filter(|r| r.tie).count(),
            guard_skips: it.details.iter().filter(|d| d.skipped).count(),
        }
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn run_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::RunDir {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn policy_checkpoint(dir: &Path, t: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("policy_t{t:03}.ckpt"))
}

pub fn reward_checkpoint(dir: &Path, t: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("reward_t{t:03}.ckpt"))
}

pub fn snapshot_checkpoint(dir: &Path, t: usize, step: usize) -> PathBuf {
    dir.join("checkpoints")
        .join("snapshots")
        .join(format!("policy_t{t:03}_s{step:04}.ckpt"))
}

pub fn records_file(dir: &Path, t: usize) -> PathBuf {
    dir.join("records").join(format!("iter_{t:03}.txt"))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// A run directory being written.
#[derive(Debug)]
pub struct RunWriter {
    dir: PathBuf,
    manifest: RunManifest,
    log: BufWriter<fs::File>,
}

impl RunWriter {
    /// Creates the layout, copies the config and writes a `running` manifest.
    pub fn create(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints").join("snapshots"))
            .map_err(|e| run_err(dir, format!("cannot create: {e}")))?;
        fs::create_dir_all(dir.join("records"))?;
        let text = cfg.to_toml_string();
        fs::write(dir.join(CONFIG_FILE), &text)?;
        let manifest = RunManifest {
            config_hash: crate::config::sha256_hex(text.as_bytes()),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: now_unix(),
            finished_unix: None,
            seeds: SeedRecord {
                init: cfg.seed_init,
                env: cfg.seed_env,
                rollout: cfg.seed_rollout,
                judge: cfg.seed_judge,
                noise: cfg.seed_noise,
            },
            status: RunStatus::Running,
            iterations_completed: 0,
            error: None,
        };
        let log = BufWriter::new(fs::File::create(dir.join(LOG_FILE))?);
        let w = Self {
            dir: dir.to_path_buf(),
            manifest,
            log,
        };
        w.write_manifest()?;
        Ok(w)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_manifest(&self) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&self.dir.join(MANIFEST_FILE), &json)
    }

    pub fn log_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.log, "{line}")?;
        Ok(())
    }

    /// Persists everything in `log`: checkpoints, snapshots, records and
    /// both CSV files.
    pub fn write_trajectory(&mut self, log: &TrajectoryLog) -> Result<()> {
        let seed = log.config.seed_init;
        self.log_line(&format!(
            "start: mean_reward {:.6} agreement {:.4} pretrain {}",
            log.initial_mean_reward,
            log.initial_agreement,
            log.pretrain.label()
        ))?;
        let mut metrics = csv::Writer::from_path(self.dir.join(METRICS_FILE))?;
        let mut iterations = csv::Writer::from_path(self.dir.join(ITERATIONS_FILE))?;
        for it in &log.iterations {
            let t = it.iteration;
            it.policy.save(&policy_checkpoint(&self.dir, t), t as u64, seed)?;
            it.reward.save(&reward_checkpoint(&self.dir, t), t as u64, seed)?;
            for (step, params) in &it.snapshots {
                let snap = it.policy.with_params(params.clone())?;
                snap.save(&snapshot_checkpoint(&self.dir, t, *step), t as u64, seed)?;
            }
            let mut rec = BufWriter::new(fs::File::create(records_file(&self.dir, t))?);
            write_records(&mut rec, &it.records)?;
            rec.flush()?;
            for s in &it.steps {
                metrics.serialize(s)?;
            }
            let row = IterationRow::from_log(it);
            self.log_line(&format!(
                "iteration {t}: mean_reward {:.6} agreement {:.4} |dpi| {:.4e} |dr| {:.4e} refine {}",
                row.mean_reward, row.judge_agreement, row.delta_pi_norm, row.delta_r_norm, row.refine_status
            ))?;
            iterations.serialize(row)?;
        }
        if log.iterations.is_empty() {
            // headers only
            metrics.write_record([
                "step",
                "iteration",
                "alpha",
                "epsilon",
                "eta",
                "projected_grad",
                "J_plus",
                "J_minus",
                "mean_reward",
                "wall_ms",
            ])?;
        }
        metrics.flush()?;
        iterations.flush()?;
        self.manifest.iterations_completed = log.iterations.len();
        self.write_manifest()
    }

    /// Saves the parameters that produced a non-finite objective.
    pub fn write_divergence(&mut self, params: &crate::param::ParamVector, layout: &MlpLayout, seed: u64) -> Result<()> {
        let policy = MlpPolicy::new(layout.clone(), params.clone())?;
        policy.save(&self.dir.join("checkpoints").join("diverged.ckpt"), 0, seed)
    }

    pub fn finish(mut self, status: RunStatus, error: Option<String>) -> Result<RunManifest> {
        if let Some(e) = &error {
            self.log_line(&format!("aborted: {e}"))?;
        } else {
            self.log_line("completed")?;
        }
        self.log.flush()?;
        self.manifest.status = status;
        self.manifest.error = error;
        self.manifest.finished_unix = Some(now_unix());
        self.write_manifest()?;
        Ok(self.manifest)
    }
}

/// A completed (or partial) run directory opened for reading.
#[derive(Clone, Debug)]
pub struct RunReader {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub manifest: RunManifest,
}

impl RunReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        if !cfg_path.is_file() {
            return Err(run_err(dir, format!("missing {CONFIG_FILE}")));
        }
        let text = fs::read_to_string(&cfg_path)?;
        let config = ExperimentConfig::from_toml_str(&text)?;
        let manifest: RunManifest = serde_json::from_reader(BufReader::new(
            fs::File::open(dir.join(MANIFEST_FILE)).map_err(|e| run_err(dir, format!("missing {MANIFEST_FILE}: {e}")))?,
        ))?;
        if manifest.config_hash != crate::config::sha256_hex(text.as_bytes()) {
            return Err(run_err(dir, "config.toml does not match the manifest hash"));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            manifest,
        })
    }

    /// Iteration tags that have a policy checkpoint, a reward checkpoint, or both.
    pub fn inventory(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut policy = Vec::new();
        let mut reward = Vec::new();
        let dir = self.dir.join("checkpoints");
        if !dir.is_dir() {
            return Err(run_err(&self.dir, "missing checkpoints/"));
        }
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            let parse = |prefix: &str| {
                name.strip_prefix(prefix)
                    .and_then(|r| r.strip_suffix(".ckpt"))
                    .and_then(|n| n.parse::<usize>().ok())
            };
            if let Some(t) = parse("policy_t") {
                policy.push(t);
            } else if let Some(t) = parse("reward_t") {
                reward.push(t);
            }
        }
        policy.sort_unstable();
        reward.sort_unstable();
        Ok((policy, reward))
    }

    /// Policy parameters and reward-trunk parameters, one snapshot per iteration.
    pub fn series(&self) -> Result<(CheckpointSeries, CheckpointSeries)> {
        let (p_tags, r_tags) = self.inventory()?;
        if p_tags != r_tags {
            return Err(run_err(
                &self.dir,
                format!("checkpoint inventory mismatch: policy {p_tags:?}, reward {r_tags:?}"),
            ));
        }
        if p_tags.is_empty() {
            return Err(run_err(&self.dir, "no iteration checkpoints"));
        }
        if let Some(gap) = p_tags.iter().enumerate().find(|(i, &t)| t != i + 1) {
            return Err(run_err(
                &self.dir,
                format!("checkpoint inventory has a gap at iteration {}: found {p_tags:?}", gap.0 + 1),
            ));
        }
        let mut policies = Vec::new();
        let mut trunks = Vec::new();
        for &t in &p_tags {
            let (h, p) = MlpPolicy::load(&policy_checkpoint(&self.dir, t))?;
            let (hr, r) = RewardModel::load(&reward_checkpoint(&self.dir, t))?;
            if h.iteration != t as u64 || hr.iteration != t as u64 {
                return Err(run_err(&self.dir, format!("checkpoint for iteration {t} has a mislabelled header")));
            }
            policies.push(p.params().clone());
            trunks.push(r.trunk().clone());
        }
        Ok((
            CheckpointSeries::new("policy", p_tags.clone(), policies)?,
            CheckpointSeries::new("reward", p_tags, trunks)?,
        ))
    }

    pub fn records(&self, t: usize) -> Result<Vec<PreferenceRecord>> {
        read_records(BufReader::new(fs::File::open(records_file(&self.dir, t))?))
    }

    pub fn iterations(&self) -> Result<Vec<IterationRow>> {
        let mut r = csv::Reader::from_path(self.dir.join(ITERATIONS_FILE))?;
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }

    pub fn metrics(&self) -> Result<Vec<crate::training::StepRecord>> {
        let mut r = csv::Reader::from_path(self.dir.join(METRICS_FILE))?;
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
}
