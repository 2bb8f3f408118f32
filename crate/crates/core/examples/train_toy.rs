//! Runs the iterative loop on the toy environment and prints per-iteration stats.
//!
//! cargo run --release --example train_toy -- [seed]

use zopro::training::run_experiment;
use zopro::ExperimentConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::default();
    if let Some(seed) = std::env::args().nth(1) {
        cfg.override_seeds(seed.parse()?);
    }
    let log = run_experiment(&cfg)?;
    println!("initial reward {:.4}  agreement {:.3}", log.initial_mean_reward, log.initial_agreement);
    for it in &log.iterations {
        println!(
            "t={} reward {:.4} score {:.4} agreement {:.3} |dpi| {:.3e} |dr| {:.3e} refine {}",
            it.iteration,
            it.mean_reward,
            it.mean_score,
            it.judge_agreement,
            it.delta_pi.norm(),
            it.delta_r.norm(),
            it.refine.label(),
        );
    }
    Ok(())
}
