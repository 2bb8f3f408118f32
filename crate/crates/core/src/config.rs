//! Experiment configuration: a flat key/value document (TOML syntax).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::MlpLayout;
use crate::optim::{Method, SpsaConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of optimise/collect/refine iterations.
    pub n_iterations: usize,
    pub steps_per_iteration: usize,
    /// Rollouts per prompt in the RLOO objective.
    pub rollouts: usize,
    /// Prompts per objective evaluation.
    pub batch_size: usize,
    pub method: Method,
    pub epsilon: f64,
    pub eta: f64,
    pub eta_decay: bool,
    /// Step-size multiplier for steps along adaptive (previous-update)
    /// directions, whose norm is ‖Δπ‖ rather than about √d.
    pub zopro_eta_scale: f64,
    /// Weight of the KL-to-initial-policy penalty; 0 disables it.
    pub kl_coef: f64,

    pub judge_noise: f64,
    /// Fraction of each iteration's fresh preference records used to refine
    /// the reward model.
    pub refine_fraction: f64,
    pub reward_lr: f64,
    pub reward_epochs: usize,
    pub reward_batch_size: usize,
    /// Epochs of Bradley-Terry training that produce the starting reward model.
    pub pretrain_epochs: usize,
    /// Preference rounds collected from the initial policy for pretraining.
    pub pretrain_rounds: usize,

    pub prompt_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub n_responses: usize,
    pub n_prompts: usize,
    pub heldout_prompts: usize,
    /// Standard deviation of the per-response offset in the hidden utility.
    pub utility_offset_std: f64,

    pub seed_init: u64,
    pub seed_env: u64,
    pub seed_rollout: u64,
    pub seed_judge: u64,
    pub seed_noise: u64,

    /// Fill the `wall_ms` metrics column. Off by default so metrics files are
    /// byte-reproducible.
    pub record_wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_iterations: 5,
            steps_per_iteration: 200,
            rollouts: 2,
            batch_size: 32,
            method: Method::Zopro,
            epsilon: 0.1,
            eta: 3e-3,
            eta_decay: true,
            zopro_eta_scale: 10.0,
            kl_coef: 0.0,
            judge_noise: 0.25,
            refine_fraction: 0.2,
            reward_lr: 0.05,
            reward_epochs: 50,
            reward_batch_size: 16,
            pretrain_epochs: 50,
            pretrain_rounds: 8,
            prompt_dim: 8,
            hidden_layers: vec![32, 32],
            n_responses: 32,
            n_prompts: 1024,
            heldout_prompts: 256,
            utility_offset_std: 0.5,
            seed_init: 7,
            seed_env: 11,
            seed_rollout: 13,
            seed_judge: 17,
            seed_noise: 19,
            record_wall_clock: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml_string().as_bytes())
    }

    pub fn spsa(&self) -> SpsaConfig {
        SpsaConfig {
            epsilon: self.epsilon,
            eta: self.eta,
            eta_decay: self.eta_decay,
            steps_per_iteration: self.steps_per_iteration,
        }
    }

    pub fn layout(&self) -> Result<MlpLayout> {
        let mut dims = vec![self.prompt_dim];
        dims.extend(&self.hidden_layers);
        dims.push(self.n_responses);
        MlpLayout::new(dims)
    }

    /// Set every seed to `seed`; streams stay distinct through their tags.
    pub fn override_seeds(&mut self, seed: u64) {
        self.seed_init = seed;
        self.seed_env = seed;
        self.seed_rollout = seed;
        self.seed_judge = seed;
        self.seed_noise = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("field `{field}`: {why}")));
        if self.n_iterations < 1 {
            return bad("n_iterations", "must be >= 1".into());
        }
        if self.rollouts < 2 {
            return bad("rollouts", format!("must be >= 2, got {}", self.rollouts));
        }
        if self.batch_size < 1 || self.batch_size > self.n_prompts {
            return bad("batch_size", format!("must lie in [1, n_prompts = {}]", self.n_prompts));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", format!("must be > 0, got {}", self.epsilon));
        }
        if !(self.zopro_eta_scale > 0.0 && self.zopro_eta_scale.is_finite()) {
            return bad("zopro_eta_scale", format!("must be > 0, got {}", self.zopro_eta_scale));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("eta", format!("must be >= 0, got {}", self.eta));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return bad("kl_coef", format!("must be >= 0, got {}", self.kl_coef));
        }
        if !(self.judge_noise >= 0.0 && self.judge_noise.is_finite()) {
            return bad("judge_noise", format!("must be >= 0, got {}", self.judge_noise));
        }
        if !(self.refine_fraction > 0.0 && self.refine_fraction <= 1.0) {
            return bad("refine_fraction", format!("must lie in (0, 1], got {}", self.refine_fraction));
        }
        if !(self.reward_lr >= 0.0 && self.reward_lr.is_finite()) {
            return bad("reward_lr", format!("must be >= 0, got {}", self.reward_lr));
        }
        if self.reward_batch_size < 1 {
            return bad("reward_batch_size", "must be >= 1".into());
        }
        if self.prompt_dim < 1 || self.n_responses < 2 || self.hidden_layers.contains(&0) {
            return bad("prompt_dim/n_responses/hidden_layers", "dimensions must be positive and n_responses >= 2".into());
        }
        if self.n_prompts < 1 || self.heldout_prompts < 1 {
            return bad("n_prompts/heldout_prompts", "must be >= 1".into());
        }
        if !(self.utility_offset_std >= 0.0 && self.utility_offset_std.is_finite()) {
            return bad("utility_offset_std", "must be >= 0".into());
        }
        Ok(())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
