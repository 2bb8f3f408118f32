//! The iterative regime: optimise the policy against the current reward
//! model, collect judged preference pairs from the updated policy, refine the
//! reward model on them, and hand the resulting parameter deltas to the next
//! iteration's direction sampler.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::models::{MlpPolicy, PromptBatch, RewardModel};
use crate::objectives::{
    bradley_terry_gradient, bradley_terry_loss, expected_score, expected_utility, judge, HiddenUtility, KlPenalty,
    PreferenceRecord, RlooObjective,
};
use crate::optim::{first_order_rloo_step, spsa_step, zopro_direction, DirectionKind, IterationState, Method};
use crate::param::{self, Composition, NoiseSpec, ParamVector};
use crate::seed::{self, tag};

/// Training prompts, held-out prompts and the hidden utility behind the judge.
#[derive(Clone, Debug)]
pub struct ToyEnvironment {
    pub prompts: PromptBatch,
    pub heldout: PromptBatch,
    pub utility: HiddenUtility,
}

impl ToyEnvironment {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let prompts = PromptBatch::gaussian(
            cfg.n_prompts,
            cfg.prompt_dim,
            seed::derive(cfg.seed_env, &[tag::ENV_FEATURES]),
        )?;
        let heldout_raw = PromptBatch::gaussian(
            cfg.heldout_prompts,
            cfg.prompt_dim,
            seed::derive(cfg.seed_env, &[tag::ENV_HELDOUT]),
        )?;
        // held-out ids follow the training ids so the two never collide
        let heldout = PromptBatch::new(
            cfg.prompt_dim,
            heldout_raw.iter().flat_map(|(_, x)| x.iter().copied()).collect(),
            (cfg.n_prompts..cfg.n_prompts + cfg.heldout_prompts).collect(),
        )?;
        let utility = HiddenUtility::random(
            cfg.prompt_dim,
            cfg.n_responses,
            cfg.utility_offset_std,
            cfg.judge_noise,
            seed::derive(cfg.seed_env, &[tag::ENV_UTILITY]),
        )?;
        Ok(Self {
            prompts,
            heldout,
            utility,
        })
    }

    /// Expected hidden utility of `policy` over the training prompts.
    pub fn mean_reward(&self, policy: &MlpPolicy) -> Result<f64> {
        expected_utility(policy, &self.utility, &self.prompts)
    }
}

/// One optimisation step as written to `metrics.csv`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub iteration: usize,
    /// Blend weight; empty for cold-start and non-ZOPrO steps.
    pub alpha: Option<f64>,
    pub epsilon: f64,
    pub eta: f64,
    pub projected_grad: f64,
    #[serde(rename = "J_plus")]
    pub j_plus: f64,
    #[serde(rename = "J_minus")]
    pub j_minus: f64,
    pub mean_reward: f64,
    pub wall_ms: Option<f64>,
}

/// Extra per-step facts not part of the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDetail {
    pub skipped: bool,
    /// Objective evaluations consumed so far in this optimisation call.
    pub evaluations: usize,
}

/// Where an optimisation call sits in the run, for the `eta` decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepClock {
    pub offset: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct PolicyOptimisation {
    pub policy: MlpPolicy,
    pub steps: Vec<StepRecord>,
    pub details: Vec<StepDetail>,
    /// Policy parameters every `steps_per_iteration / 10` steps.
    pub snapshots: Vec<(usize, ParamVector)>,
}

pub(crate) fn shuffled_positions(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    idx
}

/// Runs one iteration's worth of steps of `method` on the RLOO objective.
#[allow(clippy::too_many_arguments)]
pub fn optimise_policy(
    policy: &MlpPolicy,
    rm: &RewardModel,
    reference: &MlpPolicy,
    env: &ToyEnvironment,
    state: &IterationState,
    cfg: &ExperimentConfig,
    method: Method,
    clock: StepClock,
) -> Result<PolicyOptimisation> {
    let spsa = cfg.spsa();
    let steps = cfg.steps_per_iteration;
    let t = state.iteration_index as u64;
    let dim = policy.params().dim();
    let snapshot_every = (steps / 10).max(1);
    let kl = (cfg.kl_coef > 0.0).then_some(KlPenalty {
        reference,
        coef: cfg.kl_coef,
    });

    let mut current = policy.clone();
    let mut records = Vec::with_capacity(steps);
    let mut details = Vec::with_capacity(steps);
    let mut snapshots = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut evaluations = 0;
    let start = Instant::now();

    for i in 0..steps {
        if cursor + cfg.batch_size > order.len() {
            order = shuffled_positions(env.prompts.len(), seed::derive(cfg.seed_rollout, &[tag::SHUFFLE, t, epoch]));
            cursor = 0;
            epoch += 1;
        }
        let batch = env.prompts.select(&order[cursor..cursor + cfg.batch_size])?;
        cursor += cfg.batch_size;

        let rollout_seed = seed::derive(cfg.seed_rollout, &[tag::ROLLOUT, t, i as u64]);
        let noise_seed = seed::derive(cfg.seed_noise, &[tag::NOISE, t, i as u64]);
        let eta = spsa.eta_at(clock.offset + i, clock.total);
        let objective = RlooObjective::new(&current, rm, &batch, cfg.rollouts).with_kl(kl);
        let ctx = || format!("iteration {t}, step {i}");

        let (params, alpha, eta, projected_grad, j_plus, j_minus, skipped) = match method {
            Method::FirstOrder => {
                let (p, j) = first_order_rloo_step(&objective, eta, rollout_seed).map_err(|e| e.with_context(ctx()))?;
                evaluations += 1;
                let moved = p.sub(current.params())?.norm();
                let g = if eta > 0.0 { moved / eta } else { 0.0 };
                (p, None, eta, g, j, j, false)
            }
            Method::Zopro | Method::Spsa => {
                let direction = if method == Method::Zopro {
                    let step_state = IterationState {
                        step_index: i,
                        ..state.clone()
                    };
                    zopro_direction(&step_state, steps, dim, noise_seed)?
                } else {
                    zopro_direction(&IterationState::cold_start(), steps, dim, noise_seed)?
                };
                let adaptive = matches!(
                    direction.kind,
                    DirectionKind::Structured {
                        composition: Composition::Blended,
                        ..
                    }
                );
                let eta = if adaptive { eta * cfg.zopro_eta_scale } else { eta };
                let out = spsa_step(
                    current.params(),
                    |p, s| Ok(objective.evaluate_at(p, s)?.value),
                    &direction.z,
                    spsa.epsilon,
                    eta,
                    rollout_seed,
                )
                .map_err(|e| e.with_context(ctx()))?;
                evaluations += 2;
                (out.params, direction.alpha(), eta, out.projected_grad, out.j_plus, out.j_minus, out.skipped)
            }
        };
        current.set_params(params)?;
        let mean_reward = env.mean_reward(&current)?;
        records.push(StepRecord {
            step: clock.offset + i,
            iteration: state.iteration_index,
            alpha,
            epsilon: spsa.epsilon,
            eta,
            projected_grad,
            j_plus,
            j_minus,
            mean_reward,
            wall_ms: cfg
                .record_wall_clock
                .then(|| start.elapsed().as_secs_f64() * 1e3),
        });
        details.push(StepDetail { skipped, evaluations });
        if (i + 1) % snapshot_every == 0 {
            snapshots.push((i + 1, current.params().clone()));
        }
    }
    Ok(PolicyOptimisation {
        policy: current,
        steps: records,
        details,
        snapshots,
    })
}

/// Two independent samples per prompt, judged by the hidden utility.
pub fn collect_preferences(
    policy: &MlpPolicy,
    prompts: &PromptBatch,
    util: &HiddenUtility,
    seed_base: u64,
) -> Result<Vec<PreferenceRecord>> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts to collect on".into()));
    }
    prompts
        .iter()
        .map(|(id, x)| {
            let id64 = id as u64;
            let gen1 = policy.sample(x, seed::derive(seed_base, &[tag::COLLECT, id64, 0]))?;
            let gen2 = policy.sample(x, seed::derive(seed_base, &[tag::COLLECT, id64, 1]))?;
            let v = judge(util, x, gen1, gen2, seed::derive(seed_base, &[tag::JUDGE, id64]))?;
            Ok(PreferenceRecord {
                prompt_id: id,
                accepted: v.accepted,
                rejected: v.rejected,
                tie: v.tie,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RefineStatus {
    Refined { loss_before: f64, loss_after: f64, records: usize },
    /// Every record was a tie.
    NoData,
    /// A non-finite loss appeared; the previous model was kept.
    NonFinite,
    Skipped,
}

impl RefineStatus {
    pub fn label(&self) -> &'static str {
        match self {
            RefineStatus::Refined { .. } => "refined",
            RefineStatus::NoData => "no-data",
            RefineStatus::NonFinite => "non-finite",
            RefineStatus::Skipped => "skipped",
        }
    }
}

/// Mini-batch gradient descent on the Bradley-Terry loss. Only the reward
/// model changes.
pub fn refine_reward_model(
    rm: &RewardModel,
    records: &[PreferenceRecord],
    prompts: &PromptBatch,
    cfg: &RefineConfig,
) -> Result<(RewardModel, RefineStatus)> {
    let active: Vec<PreferenceRecord> = records.iter().filter(|r| !r.tie).copied().collect();
    if active.is_empty() {
        return Ok((rm.clone(), RefineStatus::NoData));
    }
    if cfg.epochs == 0 {
        return Ok((rm.clone(), RefineStatus::Skipped));
    }
    let loss_before = bradley_terry_loss(rm, &active, prompts)?;
    if !loss_before.is_finite() {
        return Ok((rm.clone(), RefineStatus::NonFinite));
    }
    let mut model = rm.clone();
    for epoch in 0..cfg.epochs {
        let order = shuffled_positions(active.len(), seed::derive(cfg.seed, &[tag::REFINE, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PreferenceRecord> = chunk.iter().map(|&i| active[i]).collect();
            let (gt, gh) = bradley_terry_gradient(&model, &batch, prompts)?;
            let trunk = model.trunk().offset(-cfg.lr, &gt)?;
            let head = model.head().offset(-cfg.lr, &gh)?;
            if !trunk.is_finite() || !head.is_finite() {
                return Ok((rm.clone(), RefineStatus::NonFinite));
            }
            model.set_params(trunk, head)?;
        }
    }
    let loss_after = bradley_terry_loss(&model, &active, prompts)?;
    if !loss_after.is_finite() {
        return Ok((rm.clone(), RefineStatus::NonFinite));
    }
    Ok((
        model,
        RefineStatus::Refined {
            loss_before,
            loss_after,
            records: active.len(),
        },
    ))
}

/// Fraction of held-out policy-sampled pairs (ties and exact utility ties
/// dropped) that the reward model orders the same way as the hidden utility.
pub fn judge_agreement(
    rm: &RewardModel,
    policy: &MlpPolicy,
    env: &ToyEnvironment,
    seed_base: u64,
) -> Result<f64> {
    let mut agree = 0usize;
    let mut total = 0usize;
    for (id, x) in env.heldout.iter() {
        let id64 = id as u64;
        let a = policy.sample(x, seed::derive(seed_base, &[tag::AGREEMENT, id64, 0]))?;
        let b = policy.sample(x, seed::derive(seed_base, &[tag::AGREEMENT, id64, 1]))?;
        if a == b {
            continue;
        }
        let du = env.utility.utility(x, a)? - env.utility.utility(x, b)?;
        if du == 0.0 {
            continue;
        }
        let scores = rm.scores(x)?;
        let ds = scores[a] - scores[b];
        total += 1;
        if ds * du > 0.0 {
            agree += 1;
        }
    }
    Ok(if total == 0 { f64::NAN } else { agree as f64 / total as f64 })
}

/// Deterministic subset of `records` of size `ceil(fraction * len)`.
pub fn refine_subset(records: &[PreferenceRecord], fraction: f64, seed: u64) -> Vec<PreferenceRecord> {
    let take = ((fraction * records.len() as f64).ceil() as usize).min(records.len());
    let mut picked: Vec<usize> = shuffled_positions(records.len(), seed)[..take].to_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| records[i]).collect()
}

/// State shared by every method at the start of a run.
#[derive(Clone, Debug)]
pub struct RunStart {
    pub env: ToyEnvironment,
    pub policy: MlpPolicy,
    pub reward: RewardModel,
    pub pretrain: RefineStatus,
}

/// Builds the environment, the initial policy, and the starting reward model.
///
/// The reward model starts from the policy's weights and is fitted on
/// preferences collected from the initial policy.
pub fn prepare(cfg: &ExperimentConfig) -> Result<RunStart> {
    cfg.validate()?;
    let env = ToyEnvironment::from_config(cfg)?;
    let policy = MlpPolicy::init(cfg.layout()?, seed::derive(cfg.seed_init, &[tag::INIT_POLICY]));
    let mut records = Vec::new();
    for round in 0..cfg.pretrain_rounds as u64 {
        records.extend(collect_preferences(
            &policy,
            &env.prompts,
            &env.utility,
            seed::derive(cfg.seed_judge, &[tag::PRETRAIN, round]),
        )?);
    }
    let (reward, pretrain) = if records.is_empty() {
        (RewardModel::from_policy(&policy), RefineStatus::Skipped)
    } else {
        refine_reward_model(
            &RewardModel::from_policy(&policy),
            &records,
            &env.prompts,
            &RefineConfig {
                lr: cfg.reward_lr,
                epochs: cfg.pretrain_epochs,
                batch_size: cfg.reward_batch_size,
                seed: seed::derive(cfg.seed_judge, &[tag::PRETRAIN]),
            },
        )?
    };
    Ok(RunStart {
        env,
        policy,
        reward,
        pretrain,
    })
}

#[derive(Clone, Debug)]
pub struct IterationLog {
    /// 1-based.
    pub iteration: usize,
    pub policy: MlpPolicy,
    pub reward: RewardModel,
    pub delta_pi: ParamVector,
    /// Trunk-only reward update.
    pub delta_r: ParamVector,
    /// Expected hidden utility after the policy phase.
    pub mean_reward: f64,
    /// Expected reward-model score after the policy phase (pre-refinement model).
    pub mean_score: f64,
    pub judge_agreement: f64,
    /// Cosine between this iteration's policy update and the previous one.
    pub delta_pi_cosine: Option<f64>,
    pub refine: RefineStatus,
    pub records: Vec<PreferenceRecord>,
    pub steps: Vec<StepRecord>,
    pub details: Vec<StepDetail>,
    pub snapshots: Vec<(usize, ParamVector)>,
}

#[derive(Clone, Debug)]
pub struct TrajectoryLog {
    pub config: ExperimentConfig,
    pub initial_policy: MlpPolicy,
    pub initial_reward: RewardModel,
    pub initial_mean_reward: f64,
    pub initial_agreement: f64,
    pub pretrain: RefineStatus,
    pub iterations: Vec<IterationLog>,
}

impl TrajectoryLog {
    pub fn final_mean_reward(&self) -> f64 {
        self.iterations
            .last()
            .map_or(self.initial_mean_reward, |it| it.mean_reward)
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.iterations.iter().flat_map(|it| it.steps.iter())
    }

    /// True when any step tripped the divergence guard.
    pub fn guard_tripped(&self) -> bool {
        self.iterations
            .iter()
            .flat_map(|it| it.details.iter())
            .any(|d| d.skipped)
    }
}

/// A failed run together with everything completed before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub log: Option<Box<TrajectoryLog>>,
    pub error: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for RunFailure {}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        Self { log: None, error }
    }
}

/// Executes the configured number of optimise, collect and refine iterations.
pub fn run_experiment(cfg: &ExperimentConfig) -> std::result::Result<TrajectoryLog, RunFailure> {
    let start = prepare(cfg)?;
    let initial_mean_reward = start.env.mean_reward(&start.policy)?;
    let initial_agreement = judge_agreement(
        &start.reward,
        &start.policy,
        &start.env,
        seed::derive(cfg.seed_judge, &[tag::AGREEMENT, 0]),
    )?;
    let mut log = TrajectoryLog {
        config: cfg.clone(),
        initial_policy: start.policy.clone(),
        initial_reward: start.reward.clone(),
        initial_mean_reward,
        initial_agreement,
        pretrain: start.pretrain,
        iterations: Vec::with_capacity(cfg.n_iterations),
    };
    let mut policy = start.policy.clone();
    let mut reward = start.reward.clone();
    let mut state = IterationState::cold_start();
    let total = cfg.n_iterations * cfg.steps_per_iteration;

    for t in 1..=cfg.n_iterations {
        state.iteration_index = t;
        match run_iteration(cfg, &start, &policy, &reward, &state, t, total) {
            Ok(it) => {
                let prev_delta = state.delta_pi.take();
                state.delta_pi = Some(it.delta_pi.clone());
                state.delta_r = Some(it.delta_r.clone());
                let mut it = it;
                it.delta_pi_cosine = prev_delta.map(|d| d.cosine(&it.delta_pi)).transpose()?;
                policy = it.policy.clone();
                reward = it.reward.clone();
                log.iterations.push(it);
            }
            Err(error) => {
                return Err(RunFailure {
                    log: Some(Box::new(log)),
                    error,
                })
            }
        }
    }
    Ok(log)
}

fn run_iteration(
    cfg: &ExperimentConfig,
    start: &RunStart,
    policy: &MlpPolicy,
    reward: &RewardModel,
    state: &IterationState,
    t: usize,
    total: usize,
) -> Result<IterationLog> {
    let env = &start.env;
    let t64 = t as u64;
    let opt = optimise_policy(
        policy,
        reward,
        &start.policy,
        env,
        state,
        cfg,
        cfg.method,
        StepClock {
            offset: (t - 1) * cfg.steps_per_iteration,
            total,
        },
    )?;
    let new_policy = opt.policy;
    let mean_reward = env.mean_reward(&new_policy)?;
    let mean_score = expected_score(&new_policy, reward, &env.prompts)?;

    let records = collect_preferences(
        &new_policy,
        &env.prompts,
        &env.utility,
        seed::derive(cfg.seed_judge, &[tag::COLLECT, t64]),
    )?;
    let subset = refine_subset(
        &records,
        cfg.refine_fraction,
        seed::derive(cfg.seed_judge, &[tag::SHUFFLE, t64]),
    );
    let (new_reward, refine) = refine_reward_model(
        reward,
        &subset,
        &env.prompts,
        &RefineConfig {
            lr: cfg.reward_lr,
            epochs: cfg.reward_epochs,
            batch_size: cfg.reward_batch_size,
            seed: seed::derive(cfg.seed_judge, &[tag::REFINE, t64]),
        },
    )?;
    let judge_agreement = judge_agreement(
        &new_reward,
        &new_policy,
        env,
        seed::derive(cfg.seed_judge, &[tag::AGREEMENT, t64]),
    )?;
    Ok(IterationLog {
        iteration: t,
        delta_pi: new_policy.params().sub(policy.params())?,
        delta_r: new_reward.trunk().sub(reward.trunk())?,
        policy: new_policy,
        reward: new_reward,
        mean_reward,
        mean_score,
        judge_agreement,
        delta_pi_cosine: None,
        refine,
        records,
        steps: opt.steps,
        details: opt.details,
        snapshots: opt.snapshots,
    })
}

/// Per-method reward trace for a head-to-head comparison.
#[derive(Clone, Debug)]
pub struct MethodTrace {
    pub method: Method,
    pub initial_mean_reward: f64,
    /// (evaluations, wall_ms, mean_reward) after every step.
    pub points: Vec<(usize, f64, f64)>,
}

impl MethodTrace {
    pub fn final_mean_reward(&self) -> f64 {
        self.points.last().map_or(self.initial_mean_reward, |p| p.2)
    }

    /// Objective evaluations needed to first reach `threshold`.
    pub fn evaluations_to(&self, threshold: f64) -> Option<usize> {
        if self.initial_mean_reward >= threshold {
            return Some(0);
        }
        self.points.iter().find(|p| p.2 >= threshold).map(|p| p.0)
    }
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub traces: Vec<MethodTrace>,
    /// Halfway between the common start and the first-order final reward,
    /// when first-order is among the methods.
    pub threshold: Option<f64>,
}

impl Comparison {
    pub fn trace(&self, method: Method) -> Option<&MethodTrace> {
        self.traces.iter().find(|t| t.method == method)
    }
}

/// Runs every method for one iteration from the same post-warm-up state.
///
/// A shared first iteration (cold-start SPSA, collection, refinement)
/// provides the previous policy and reward updates; each method then runs
/// the second iteration from that identical checkpoint with identical seeds.
pub fn compare_methods(cfg: &ExperimentConfig, methods: &[Method]) -> Result<Comparison> {
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods to compare".into()));
    }
    let start = prepare(cfg)?;
    let total = 2 * cfg.steps_per_iteration;
    let warm = run_iteration(cfg, &start, &start.policy, &start.reward, &IterationState::cold_start(), 1, total)?;
    let state = IterationState {
        delta_pi: Some(warm.delta_pi.clone()),
        delta_r: Some(warm.delta_r.clone()),
        step_index: 0,
        iteration_index: 2,
    };
    let initial = start.env.mean_reward(&warm.policy)?;
    let mut traces = Vec::with_capacity(methods.len());
    for &method in methods {
        let clock_start = Instant::now();
        let opt = optimise_policy(
            &warm.policy,
            &warm.reward,
            &start.policy,
            &start.env,
            &state,
            cfg,
            method,
            StepClock {
                offset: cfg.steps_per_iteration,
                total,
            },
        )?;
        let elapsed = clock_start.elapsed().as_secs_f64() * 1e3;
        let n = opt.steps.len().max(1) as f64;
        let points = opt
            .steps
            .iter()
            .zip(&opt.details)
            .enumerate()
            .map(|(i, (s, d))| (d.evaluations, s.wall_ms.unwrap_or(elapsed * (i + 1) as f64 / n), s.mean_reward))
            .collect();
        traces.push(MethodTrace {
            method,
            initial_mean_reward: initial,
            points,
        });
    }
    let threshold = traces
        .iter()
        .find(|t| t.method == Method::FirstOrder)
        .map(|fo| initial + 0.5 * (fo.final_mean_reward() - initial));
    Ok(Comparison { traces, threshold })
}

/// Deterministic noise seed used by the sampler at (iteration, step).
pub fn noise_seed(cfg: &ExperimentConfig, iteration: usize, step: usize) -> u64 {
    seed::derive(cfg.seed_noise, &[tag::NOISE, iteration as u64, step as u64])
}

/// The raw Gaussian draw behind step `step` of iteration `iteration`.
pub fn raw_noise(cfg: &ExperimentConfig, iteration: usize, step: usize, dim: usize) -> Result<ParamVector> {
    param::sample_gaussian(NoiseSpec::new(noise_seed(cfg, iteration, step), dim))
}
