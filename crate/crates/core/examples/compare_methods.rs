//! ZOPrO, plain SPSA and first-order RLOO from the same starting point.
//!
//! cargo run --release --example compare_methods -- [seed]

use zopro::optim::Method;
use zopro::training::compare_methods;
use zopro::ExperimentConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::default();
    cfg.override_seeds(std::env::args().nth(1).map_or(Ok(1), |s| s.parse())?);
    let cmp = compare_methods(&cfg, &[Method::Zopro, Method::Spsa, Method::FirstOrder])?;
    let threshold = cmp.threshold.unwrap_or(f64::NAN);
    println!("threshold (half of the first-order gain): {threshold:.4}");
    for t in &cmp.traces {
        let curve: Vec<String> = t.points.iter().step_by(40).map(|p| format!("{:.3}", p.2)).collect();
        println!(
            "{:>11}: start {:.4} final {:.4} evaluations to threshold {:?}\n             every 40 steps: {}",
            t.method.name(),
            t.initial_mean_reward,
            t.final_mean_reward(),
            t.evaluations_to(threshold),
            curve.join(" ")
        );
    }
    Ok(())
}
