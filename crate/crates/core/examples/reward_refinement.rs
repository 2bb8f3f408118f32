//! Collects judged preference pairs from a policy and fits the Bradley-Terry
//! reward model to them.
//!
//! cargo run --release --example reward_refinement

use zopro::models::{MlpPolicy, RewardModel};
use zopro::objectives::bradley_terry_loss;
use zopro::training::{collect_preferences, judge_agreement, refine_reward_model, RefineConfig, ToyEnvironment};
use zopro::ExperimentConfig;

fn main() -> zopro::Result<()> {
    let cfg = ExperimentConfig::default();
    let env = ToyEnvironment::from_config(&cfg)?;
    let policy = MlpPolicy::init(cfg.layout()?, cfg.seed_init);
    let mut reward = RewardModel::from_policy(&policy);
    println!("untrained agreement with the hidden utility: {:.3}", judge_agreement(&reward, &policy, &env, 5)?);

    for round in 0..4u64 {
        let records = collect_preferences(&policy, &env.prompts, &env.utility, round)?;
        let ties = records.iter().filter(|r| r.tie).count();
        let refine = RefineConfig {
            lr: cfg.reward_lr,
            epochs: 20,
            batch_size: cfg.reward_batch_size,
            seed: round,
        };
        let (next, status) = refine_reward_model(&reward, &records, &env.prompts, &refine)?;
        let active: Vec<_> = records.iter().filter(|r| !r.tie).copied().collect();
        println!(
            "round {round}: {} pairs ({ties} ties), loss {:.4} -> {:.4}, agreement {:.3} [{}]",
            records.len(),
            bradley_terry_loss(&reward, &active, &env.prompts)?,
            bradley_terry_loss(&next, &active, &env.prompts)?,
            judge_agreement(&next, &policy, &env, 5)?,
            status.label()
        );
        reward = next;
    }
    Ok(())
}
