//! A small eta x epsilon sweep with a deliberately explosive pair.
//!
//! cargo run --release --example grid_sweep -- [out_dir]

use std::path::PathBuf;

use zopro::{cli, ExperimentConfig};

fn main() -> zopro::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("zopro_grid_example"));
    let cfg = ExperimentConfig {
        n_iterations: 2,
        steps_per_iteration: 100,
        ..ExperimentConfig::default()
    };
    let rows = cli::grid(&cfg, &[1e2, 3e-3], &[1.0, 0.1], &out)?;
    println!("{:>8} {:>8} {:>12} collapsed", "eta", "epsilon", "delta");
    for r in rows {
        println!("{:>8e} {:>8e} {:>+12.4} {}", r.eta, r.epsilon, r.final_reward_delta, r.collapsed_flag);
    }
    println!("grid.csv in {}", out.display());
    Ok(())
}
