//! SPSA, the ZOPrO direction sampler and a first-order RLOO baseline.
//!
//! Every objective here is maximised: [`spsa_step`] moves along
//! `+projected_grad * z`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::RlooObjective;
use crate::param::{self, compose_perturbation, project_orthogonal, Composition, NoiseSpec, ParamVector, Projection};

/// Steps whose projected gradient exceeds this magnitude are skipped.
pub const DIVERGENCE_GUARD: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpsaConfig {
    pub epsilon: f64,
    pub eta: f64,
    /// Decay `eta` linearly to zero over the whole run.
    pub eta_decay: bool,
    pub steps_per_iteration: usize,
}

impl Default for SpsaConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            eta: 1e-5,
            eta_decay: true,
            steps_per_iteration: 200,
        }
    }
}

impl SpsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be >= 0, got {}", self.eta)));
        }
        Ok(())
    }

    /// Learning rate at `global_step` of a run lasting `total_steps` steps.
    pub fn eta_at(&self, global_step: usize, total_steps: usize) -> f64 {
        if !self.eta_decay || total_steps == 0 {
            return self.eta;
        }
        self.eta * (1.0 - global_step as f64 / total_steps as f64).max(0.0)
    }
}

/// Sampler memory carried between iterations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationState {
    /// Policy update of the previous iteration.
    pub delta_pi: Option<ParamVector>,
    /// Reward-trunk update of the previous iteration.
    pub delta_r: Option<ParamVector>,
    pub step_index: usize,
    /// 1-based iteration counter.
    pub iteration_index: usize,
}

impl IterationState {
    pub fn cold_start() -> Self {
        Self {
            iteration_index: 1,
            ..Self::default()
        }
    }

    pub fn is_cold(&self) -> bool {
        self.delta_pi.is_none()
    }
}

/// Linear decay from 1 at the first step of an iteration to 0 at the last.
pub fn alpha_schedule(step_index: usize, steps_per_iteration: usize) -> Result<f64> {
    if step_index >= steps_per_iteration {
        return Err(Error::InvalidArgument(format!(
            "step {step_index} outside [0, {steps_per_iteration})"
        )));
    }
    if steps_per_iteration == 1 {
        return Ok(0.0);
    }
    Ok(1.0 - step_index as f64 / (steps_per_iteration - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Structured ZOPrO directions.
    Zopro,
    /// Plain Gaussian SPSA.
    Spsa,
    /// Analytic RLOO gradient.
    FirstOrder,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Zopro => "zopro",
            Method::Spsa => "spsa",
            Method::FirstOrder => "first_order",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "zopro" => Ok(Method::Zopro),
            "spsa" => Ok(Method::Spsa),
            "first_order" | "first-order" | "rloo" => Ok(Method::FirstOrder),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

/// How a direction was produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DirectionKind {
    /// Raw Gaussian draw: first iteration or plain SPSA.
    ColdStart,
    Structured {
        alpha: f64,
        projection: Projection,
        composition: Composition,
    },
}

#[derive(Clone, Debug)]
pub struct Direction {
    pub z: ParamVector,
    /// Projected noise before composition; absent for cold-start draws.
    pub u: Option<ParamVector>,
    pub kind: DirectionKind,
}

impl Direction {
    pub fn alpha(&self) -> Option<f64> {
        match self.kind {
            DirectionKind::Structured { alpha, .. } => Some(alpha),
            DirectionKind::ColdStart => None,
        }
    }
}

/// Samples `z_i` for step `state.step_index` of the current iteration.
///
/// Without a previous policy update this is a plain Gaussian draw. Otherwise
/// the Gaussian draw is projected off the previous reward-trunk update and
/// blended with the previous policy update at weight
/// `alpha_schedule(step_index, steps_per_iteration)`.
pub fn zopro_direction(
    state: &IterationState,
    steps_per_iteration: usize,
    dim: usize,
    noise_seed: u64,
) -> Result<Direction> {
    let g = param::sample_gaussian(NoiseSpec::new(noise_seed, dim))?;
    let Some(delta_pi) = &state.delta_pi else {
        return Ok(Direction {
            z: g,
            u: None,
            kind: DirectionKind::ColdStart,
        });
    };
    if delta_pi.dim() != dim {
        return Err(Error::dim_mismatch(delta_pi.dim(), dim));
    }
    let alpha = alpha_schedule(state.step_index, steps_per_iteration)?;
    let (u, projection) = match &state.delta_r {
        Some(dr) => project_orthogonal(&g, dr)?,
        None => (g, Projection::Skipped),
    };
    let (z, composition) = compose_perturbation(delta_pi, &u, alpha)?;
    Ok(Direction {
        z,
        u: Some(u),
        kind: DirectionKind::Structured {
            alpha,
            projection,
            composition,
        },
    })
}

#[derive(Clone, Debug)]
pub struct SpsaOutcome {
    pub params: ParamVector,
    pub projected_grad: f64,
    pub j_plus: f64,
    pub j_minus: f64,
    /// The divergence guard rejected the step; `params` are unchanged.
    pub skipped: bool,
}

/// One two-point SPSA step along `z`.
///
/// `objective` is called at `params + epsilon z` and `params - epsilon z`, both
/// times with `rollout_seed`, so any sampling inside it uses common random
/// numbers.
pub fn spsa_step<F>(
    params: &ParamVector,
    mut objective: F,
    z: &ParamVector,
    epsilon: f64,
    eta: f64,
    rollout_seed: u64,
) -> Result<SpsaOutcome>
where
    F: FnMut(&ParamVector, u64) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be >= 0, got {eta}")));
    }
    let j_plus = objective(&params.offset(epsilon, z)?, rollout_seed)?;
    let j_minus = objective(&params.offset(-epsilon, z)?, rollout_seed)?;
    if !j_plus.is_finite() || !j_minus.is_finite() {
        return Err(Error::ObjectiveDivergence {
            params: Box::new(params.clone()),
            j_plus,
            j_minus,
            context: None,
        });
    }
    let projected_grad = (j_plus - j_minus) / (2.0 * epsilon);
    if !projected_grad.is_finite() || projected_grad.abs() > DIVERGENCE_GUARD {
        return Ok(SpsaOutcome {
            params: params.clone(),
            projected_grad,
            j_plus,
            j_minus,
            skipped: true,
        });
    }
    let updated = params.offset(eta * projected_grad, z)?;
    if !updated.is_finite() {
        return Err(Error::ObjectiveDivergence {
            params: Box::new(params.clone()),
            j_plus,
            j_minus,
            context: Some("update overflowed".into()),
        });
    }
    Ok(SpsaOutcome {
        params: updated,
        projected_grad,
        j_plus,
        j_minus,
        skipped: false,
    })
}

/// Gradient ascent on `J` using the analytic leave-one-out policy gradient
/// over the rollouts drawn from `rollout_seed`.
pub fn first_order_rloo_step(objective: &RlooObjective<'_>, eta: f64, rollout_seed: u64) -> Result<(ParamVector, f64)> {
    let (grad, eval) = objective.gradient(rollout_seed)?;
    let updated = objective.policy.params().offset(eta, &grad)?;
    if !updated.is_finite() {
        return Err(Error::ObjectiveDivergence {
            params: Box::new(objective.policy.params().clone()),
            j_plus: eval.value,
            j_minus: eval.value,
            context: Some("first-order update overflowed".into()),
        });
    }
    Ok((updated, eval.value))
}
