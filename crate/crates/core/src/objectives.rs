//! Scalar objectives that need only forward passes: the RLOO policy
//! objective, the Bradley-Terry loss, and a synthetic judge backed by a hidden
//! linear utility.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::models::{log_softmax, softmax, inverse_cdf, MlpPolicy, PromptBatch, RewardModel};
use crate::param::ParamVector;
use crate::seed;

/// The `k` rollouts drawn for one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSet {
    pub prompt_id: usize,
    pub responses: Vec<usize>,
    pub rewards: Vec<f64>,
    pub logprobs: Vec<f64>,
    /// Uniforms fed to the inverse CDF; identical across evaluations that
    /// share a rollout seed.
    pub draws: Vec<f64>,
}

impl RolloutSet {
    pub fn advantages(&self) -> Result<Vec<f64>> {
        loo_advantages(&self.rewards)
    }
}

/// `r_j - mean_{i != j} r_i` for every rollout.
pub fn loo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-out baseline needs k >= 2 rollouts, got {k}"
        )));
    }
    let total: f64 = rewards.iter().sum();
    let others = (k - 1) as f64;
    Ok(rewards.iter().map(|r| r - (total - r) / others).collect())
}

/// Uniform draws for the rollouts of `prompt_id` under `rollout_seed`.
pub fn rollout_draws(rollout_seed: u64, prompt_id: usize, k: usize) -> Vec<f64> {
    let mut rng = seed::rng(seed::derive(rollout_seed, &[seed::tag::ROLLOUT, prompt_id as u64]));
    (0..k).map(|_| rng.random::<f64>()).collect()
}

/// Optional KL(pi || reference) penalty on the policy objective.
#[derive(Clone, Copy, Debug)]
pub struct KlPenalty<'a> {
    pub reference: &'a MlpPolicy,
    pub coef: f64,
}

#[derive(Clone, Debug)]
pub struct RlooEvaluation {
    pub value: f64,
    pub rollouts: Vec<RolloutSet>,
    /// Mean reward-model score of the sampled rollouts.
    pub mean_score: f64,
    /// Mean KL to the reference; zero when no penalty is configured.
    pub kl: f64,
}

/// Everything needed to evaluate `J` at arbitrary policy parameters.
#[derive(Clone, Copy, Debug)]
pub struct RlooObjective<'a> {
    pub policy: &'a MlpPolicy,
    pub reward_model: &'a RewardModel,
    pub batch: &'a PromptBatch,
    pub k: usize,
    pub kl: Option<KlPenalty<'a>>,
}

impl<'a> RlooObjective<'a> {
    pub fn new(policy: &'a MlpPolicy, reward_model: &'a RewardModel, batch: &'a PromptBatch, k: usize) -> Self {
        Self {
            policy,
            reward_model,
            batch,
            k,
            kl: None,
        }
    }

    pub fn with_kl(mut self, kl: Option<KlPenalty<'a>>) -> Self {
        self.kl = kl.filter(|p| p.coef != 0.0);
        self
    }

    /// `J` at the objective's own policy.
    pub fn evaluate(&self, rollout_seed: u64) -> Result<RlooEvaluation> {
        evaluate_policy(self, self.policy, rollout_seed)
    }

    /// `J` with the policy's parameters replaced by `params`.
    pub fn evaluate_at(&self, params: &ParamVector, rollout_seed: u64) -> Result<RlooEvaluation> {
        let policy = self.policy.with_params(params.clone())?;
        evaluate_policy(self, &policy, rollout_seed)
    }

    /// Analytic gradient of `J` holding the sampled rollouts fixed.
    pub fn gradient(&self, rollout_seed: u64) -> Result<(ParamVector, RlooEvaluation)> {
        let eval = self.evaluate(rollout_seed)?;
        let mut grad = vec![0.0; self.policy.params().dim()];
        let scale = 1.0 / (self.batch.len() * self.k) as f64;
        for ((_, x), set) in self.batch.iter().zip(&eval.rollouts) {
            for (&y, a) in set.responses.iter().zip(set.advantages()?) {
                if a != 0.0 {
                    self.policy.accumulate_grad_log_prob(x, y, scale * a, &mut grad)?;
                }
            }
        }
        if let Some(kl) = self.kl {
            let kl_grad = kl_gradient(self.policy, kl.reference, self.batch)?;
            for (g, k) in grad.iter_mut().zip(kl_grad.as_slice()) {
                *g -= kl.coef * k;
            }
        }
        Ok((ParamVector::from_vec_unchecked(grad), eval))
    }
}

fn evaluate_policy(obj: &RlooObjective<'_>, policy: &MlpPolicy, rollout_seed: u64) -> Result<RlooEvaluation> {
    if obj.k < 2 {
        return Err(Error::InvalidArgument(format!(
            "RLOO needs k >= 2 rollouts, got {}",
            obj.k
        )));
    }
    let mut rollouts = Vec::with_capacity(obj.batch.len());
    let mut total = 0.0;
    let mut score_total = 0.0;
    for (prompt_id, x) in obj.batch.iter() {
        let logp = policy.log_probs(x)?;
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let draws = rollout_draws(rollout_seed, prompt_id, obj.k);
        let responses: Vec<usize> = draws.iter().map(|&u| inverse_cdf(&probs, u)).collect();
        let scores = obj.reward_model.scores(x)?;
        let rewards: Vec<f64> = responses.iter().map(|&y| scores[y]).collect();
        let logprobs: Vec<f64> = responses.iter().map(|&y| logp[y]).collect();
        let adv = loo_advantages(&rewards)?;
        total += adv.iter().zip(&logprobs).map(|(a, l)| a * l).sum::<f64>();
        score_total += rewards.iter().sum::<f64>();
        rollouts.push(RolloutSet {
            prompt_id,
            responses,
            rewards,
            logprobs,
            draws,
        });
    }
    let n = (obj.batch.len() * obj.k) as f64;
    let mut value = total / n;
    let mut kl_value = 0.0;
    if let Some(kl) = obj.kl {
        kl_value = kl_to_reference(policy, kl.reference, obj.batch)?;
        value -= kl.coef * kl_value;
    }
    Ok(RlooEvaluation {
        value,
        rollouts,
        mean_score: score_total / n,
        kl: kl_value,
    })
}

/// `(1/(n k)) sum_prompts sum_j A_j log pi(y_j | x)` with leave-one-out
/// advantages and rollouts drawn from `rollout_seed`.
pub fn rloo_objective(
    policy: &MlpPolicy,
    rm: &RewardModel,
    batch: &PromptBatch,
    k: usize,
    rollout_seed: u64,
) -> Result<f64> {
    Ok(RlooObjective::new(policy, rm, batch, k).evaluate(rollout_seed)?.value)
}

fn check_same_arch(policy: &MlpPolicy, reference: &MlpPolicy) -> Result<()> {
    if policy.layout() != reference.layout() {
        return Err(Error::InvalidDimension(format!(
            "policy layout {:?} differs from reference {:?}",
            policy.layout().dims(),
            reference.layout().dims()
        )));
    }
    Ok(())
}

/// Mean over prompts of the exact categorical KL(pi || reference).
pub fn kl_to_reference(policy: &MlpPolicy, reference: &MlpPolicy, batch: &PromptBatch) -> Result<f64> {
    check_same_arch(policy, reference)?;
    let mut total = 0.0;
    for (_, x) in batch.iter() {
        total += categorical_kl(&policy.log_probs(x)?, &reference.log_probs(x)?);
    }
    Ok(total / batch.len() as f64)
}

/// KL between two categoricals given as log-probabilities.
pub fn categorical_kl(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p == 0.0 { 0.0 } else { p * (lp - lq) }
        })
        .sum::<f64>()
        .max(0.0)
}

fn kl_gradient(policy: &MlpPolicy, reference: &MlpPolicy, batch: &PromptBatch) -> Result<ParamVector> {
    check_same_arch(policy, reference)?;
    let layout = policy.layout();
    let mut grad = vec![0.0; layout.param_count()];
    let scale = 1.0 / batch.len() as f64;
    for (_, x) in batch.iter() {
        let trace = layout.trace(policy.params().as_slice(), x)?;
        let logp = log_softmax(trace.output());
        let logq = reference.log_probs(x)?;
        let kl = categorical_kl(&logp, &logq);
        let grad_out: Vec<f64> = logp
            .iter()
            .zip(&logq)
            .map(|(lp, lq)| scale * lp.exp() * (lp - lq - kl))
            .collect();
        layout.backward(policy.params().as_slice(), &trace, &grad_out, &mut grad);
    }
    Ok(ParamVector::from_vec_unchecked(grad))
}

/// One judged pair. `tie` marks identical generations, which carry no
/// preference information.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PreferenceRecord {
    pub prompt_id: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub tie: bool,
}

impl PreferenceRecord {
    pub fn new(prompt_id: usize, accepted: usize, rejected: usize) -> Result<Self> {
        if accepted == rejected {
            return Err(Error::InvalidArgument(
                "accepted and rejected responses must differ".into(),
            ));
        }
        Ok(Self {
            prompt_id,
            accepted,
            rejected,
            tie: false,
        })
    }
}

impl fmt::Display for PreferenceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{}",
            self.prompt_id,
            self.accepted,
            self.rejected,
            u8::from(self.tie)
        )
    }
}

impl FromStr for PreferenceRecord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed preference record `{s}`"));
        let fields: Vec<&str> = s.trim().split(',').collect();
        let [p, a, r, t] = fields.as_slice() else {
            return Err(bad());
        };
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let tie = match *t {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        let rec = Self {
            prompt_id: num(p)?,
            accepted: num(a)?,
            rejected: num(r)?,
            tie,
        };
        if !tie && rec.accepted == rec.rejected {
            return Err(bad());
        }
        Ok(rec)
    }
}

/// One record per line: `prompt_id,accepted,rejected,tie`.
pub fn write_records<W: Write>(mut w: W, records: &[PreferenceRecord]) -> Result<()> {
    for r in records {
        writeln!(w, "{r}")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<PreferenceRecord>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| l?.parse())
        .collect()
}

fn record_features(prompts: &PromptBatch, id: usize) -> Result<&[f64]> {
    prompts
        .features_of(id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown prompt id {id}")))
}

/// `-ln sigma(x)`, computed without overflow.
pub(crate) fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `-ln sigma(score(accepted) - score(rejected))` over the non-tie records.
pub fn bradley_terry_loss(rm: &RewardModel, records: &[PreferenceRecord], prompts: &PromptBatch) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for r in records.iter().filter(|r| !r.tie) {
        let scores = rm.scores(record_features(prompts, r.prompt_id)?)?;
        let (acc, rej) = response_pair(&scores, r)?;
        total += neg_log_sigmoid(acc - rej);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "Bradley-Terry loss needs at least one non-tie record".into(),
        ));
    }
    Ok(total / n as f64)
}

fn response_pair(scores: &[f64], r: &PreferenceRecord) -> Result<(f64, f64)> {
    match (scores.get(r.accepted), scores.get(r.rejected)) {
        (Some(a), Some(b)) => Ok((*a, *b)),
        _ => Err(Error::InvalidArgument(format!(
            "record response out of range: {r}"
        ))),
    }
}

/// Gradient of [`bradley_terry_loss`] with respect to (trunk, head).
pub fn bradley_terry_gradient(
    rm: &RewardModel,
    records: &[PreferenceRecord],
    prompts: &PromptBatch,
) -> Result<(ParamVector, ParamVector)> {
    let active: Vec<&PreferenceRecord> = records.iter().filter(|r| !r.tie).collect();
    if active.is_empty() {
        return Err(Error::InvalidArgument(
            "Bradley-Terry gradient needs at least one non-tie record".into(),
        ));
    }
    let mut trunk = vec![0.0; rm.trunk().dim()];
    let mut head = vec![0.0; rm.head().dim()];
    let n = active.len() as f64;
    for r in active {
        let x = record_features(prompts, r.prompt_id)?;
        let scores = rm.scores(x)?;
        let (acc, rej) = response_pair(&scores, r)?;
        // d/d(gap) of -ln sigma(gap) is -sigma(-gap)
        let w = -sigmoid(rej - acc) / n;
        rm.accumulate_score_grad(x, r.accepted, w, &mut trunk, &mut head)?;
        rm.accumulate_score_grad(x, r.rejected, -w, &mut trunk, &mut head)?;
    }
    Ok((
        ParamVector::from_vec_unchecked(trunk),
        ParamVector::from_vec_unchecked(head),
    ))
}

/// Frozen linear utility `u(x, a) = W_a . x + c_a` standing in for the
/// external judge's taste, plus the judge's noise scale.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenUtility {
    params: ParamVector,
    feature_dim: usize,
    n_responses: usize,
    judge_noise: f64,
}

impl HiddenUtility {
    /// `params` holds `n_responses` rows of `feature_dim` weights followed by
    /// `n_responses` offsets.
    pub fn new(params: ParamVector, feature_dim: usize, n_responses: usize, judge_noise: f64) -> Result<Self> {
        if params.dim() != n_responses * (feature_dim + 1) {
            return Err(Error::dim_mismatch(params.dim(), n_responses * (feature_dim + 1)));
        }
        if judge_noise.is_nan() || judge_noise < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "judge noise must be >= 0, got {judge_noise}"
            )));
        }
        Ok(Self {
            params,
            feature_dim,
            n_responses,
            judge_noise,
        })
    }

    /// Weights `N(0, 1/p)` and offsets `N(0, offset_std^2)`: for standard-normal
    /// features each response's utility has variance `1 + offset_std^2`.
    pub fn random(feature_dim: usize, n_responses: usize, offset_std: f64, judge_noise: f64, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let w = Normal::new(0.0, 1.0 / (feature_dim as f64).sqrt())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let c = Normal::new(0.0, offset_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut values: Vec<f64> = (0..n_responses * feature_dim).map(|_| w.sample(&mut rng)).collect();
        values.extend((0..n_responses).map(|_| c.sample(&mut rng)));
        Self::new(ParamVector::new(values)?, feature_dim, n_responses, judge_noise)
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn judge_noise(&self) -> f64 {
        self.judge_noise
    }

    pub fn n_responses(&self) -> usize {
        self.n_responses
    }

    pub fn with_judge_noise(&self, judge_noise: f64) -> Result<Self> {
        Self::new(self.params.clone(), self.feature_dim, self.n_responses, judge_noise)
    }

    pub fn utility(&self, features: &[f64], response: usize) -> Result<f64> {
        if features.len() != self.feature_dim {
            return Err(Error::dim_mismatch(features.len(), self.feature_dim));
        }
        if response >= self.n_responses {
            return Err(Error::InvalidArgument(format!(
                "response {response} outside [0, {})",
                self.n_responses
            )));
        }
        let p = self.params.as_slice();
        let row = &p[response * self.feature_dim..(response + 1) * self.feature_dim];
        let offset = p[self.n_responses * self.feature_dim + response];
        Ok(offset + row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>())
    }

    /// Expected utility of a categorical distribution over responses.
    pub fn expected(&self, features: &[f64], probs: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (a, p) in probs.iter().enumerate() {
            total += p * self.utility(features, a)?;
        }
        Ok(total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub accepted: usize,
    pub rejected: usize,
    pub tie: bool,
}

/// Prefers `gen1` with probability `sigma((u(gen1) - u(gen2)) / beta)`.
///
/// With `beta = 0` the judge is an argmax (exact utility ties are broken by a
/// fair coin). Identical generations return `(gen1, gen2)` flagged as a tie.
pub fn judge(util: &HiddenUtility, features: &[f64], gen1: usize, gen2: usize, seed: u64) -> Result<Verdict> {
    let u1 = util.utility(features, gen1)?;
    let u2 = util.utility(features, gen2)?;
    if gen1 == gen2 {
        return Ok(Verdict {
            accepted: gen1,
            rejected: gen2,
            tie: true,
        });
    }
    let gap = u1 - u2;
    let p_first = if util.judge_noise == 0.0 || gap == 0.0 {
        if gap > 0.0 {
            1.0
        } else if gap < 0.0 {
            0.0
        } else {
            0.5
        }
    } else {
        sigmoid(gap / util.judge_noise)
    };
    let coin: f64 = seed::rng(seed).random();
    let (accepted, rejected) = if coin < p_first { (gen1, gen2) } else { (gen2, gen1) };
    Ok(Verdict {
        accepted,
        rejected,
        tie: false,
    })
}

/// Expected hidden utility of the policy, averaged over the prompts.
pub fn expected_utility(policy: &MlpPolicy, util: &HiddenUtility, prompts: &PromptBatch) -> Result<f64> {
    let mut total = 0.0;
    for (_, x) in prompts.iter() {
        total += util.expected(x, &policy.probs(x)?)?;
    }
    Ok(total / prompts.len() as f64)
}

/// Expected reward-model score of the policy, averaged over the prompts.
pub fn expected_score(policy: &MlpPolicy, rm: &RewardModel, prompts: &PromptBatch) -> Result<f64> {
    let mut total = 0.0;
    for (_, x) in prompts.iter() {
        let probs = softmax(&policy.forward(x)?);
        let scores = rm.scores(x)?;
        total += probs.iter().zip(&scores).map(|(p, s)| p * s).sum::<f64>();
    }
    Ok(total / prompts.len() as f64)
}
