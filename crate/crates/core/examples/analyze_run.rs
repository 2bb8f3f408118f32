//! Trains a short run into a scratch directory and prints its trajectory
//! analytics.
//!
//! cargo run --release --example analyze_run -- [out_dir]

use std::path::PathBuf;

use zopro::{cli, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("zopro_analyze_example"));
    let cfg = ExperimentConfig {
        n_iterations: 4,
        steps_per_iteration: 100,
        ..ExperimentConfig::default()
    };
    let run = root.join("run");
    let outcome = cli::train(&cfg, &run)?;
    if let Some(e) = outcome.error {
        return Err(e.into());
    }
    let report = cli::cmd_analyze(&run, &root.join("analysis"))?;
    println!("checkpoints {:?}, dim {}, flags {:?}", report.tags, report.dim, report.flags);
    for (((p, d), a), r) in report
        .procrustes_disparity
        .iter()
        .zip(&report.distance_correlation)
        .zip(&report.relative_angle_deg)
        .zip(&report.pearson_delta_corr)
    {
        println!(
            "t={}: disparity {:.4} dcor {:.4} angle(dpi, dR) {:.2} deg pearson {:+.4}",
            p.tag,
            p.value.unwrap_or(f64::NAN),
            d.value.unwrap_or(f64::NAN),
            a.value.unwrap_or(f64::NAN),
            r.value.unwrap_or(f64::NAN)
        );
    }
    for row in &report.layerwise_angles {
        let layers: Vec<String> = row.angles.iter().map(|a| format!("{:.1}", a.unwrap_or(f64::NAN))).collect();
        println!("t={} per-layer angles [{}] global {:.2}", row.tag, layers.join(", "), row.global.unwrap_or(f64::NAN));
    }
    println!("report and plot data in {}", root.join("analysis").display());
    Ok(())
}
