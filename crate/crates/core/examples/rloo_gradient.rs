//! The RLOO objective under a fixed rollout seed, its analytic gradient, and a
//! finite-difference check of that gradient.
//!
//! cargo run --release --example rloo_gradient

use zopro::models::{MlpLayout, MlpPolicy, PromptBatch, RewardModel};
use zopro::objectives::{loo_advantages, RlooObjective};
use zopro::param::ParamVector;

fn main() -> zopro::Result<()> {
    let layout = MlpLayout::new(vec![4, 8, 6])?;
    let policy = MlpPolicy::init(layout.clone(), 1);
    let reward = RewardModel::new(layout.clone(), layout.init(2), ParamVector::new(vec![1.0, -0.5, 0.3, 0.8, -1.2, 0.4, 0.0])?)?;
    let batch = PromptBatch::gaussian(16, 4, 3)?;
    let objective = RlooObjective::new(&policy, &reward, &batch, 2);

    println!("leave-one-out advantages of [1, 3]: {:?}", loo_advantages(&[1.0, 3.0])?);
    let (grad, eval) = objective.gradient(7)?;
    println!("J = {:.6}, mean score of rollouts = {:.4}", eval.value, eval.mean_score);
    let set = &eval.rollouts[0];
    println!("prompt {}: responses {:?}, rewards {:.3?}", set.prompt_id, set.responses, set.rewards);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..grad.dim() {
        let mut e = vec![0.0; grad.dim()];
        e[k] = h;
        let e = ParamVector::new(e)?;
        let plus = objective.evaluate_at(&policy.params().offset(1.0, &e)?, 7)?.value;
        let minus = objective.evaluate_at(&policy.params().offset(-1.0, &e)?, 7)?.value;
        worst = worst.max(((plus - minus) / (2.0 * h) - grad.as_slice()[k]).abs());
    }
    println!("|grad| = {:.4e}, max finite-difference error = {worst:.2e}", grad.norm());
    Ok(())
}
