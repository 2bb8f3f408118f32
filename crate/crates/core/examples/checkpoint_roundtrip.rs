//! Saves a policy checkpoint and reloads it bit-exactly.
//!
//! cargo run --release --example checkpoint_roundtrip

use zopro::models::MlpPolicy;
use zopro::ExperimentConfig;

fn main() -> zopro::Result<()> {
    let cfg = ExperimentConfig::default();
    let policy = MlpPolicy::init(cfg.layout()?, cfg.seed_init);
    let path = std::env::temp_dir().join("zopro_policy_example.ckpt");
    policy.save(&path, 0, cfg.seed_init)?;
    let (header, back) = MlpPolicy::load(&path)?;
    let same = policy.params().as_slice().iter().zip(back.params().as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("{header:?}");
    println!("{} parameters, {} bytes on disk, bit-exact: {same}", back.params().dim(), std::fs::metadata(&path)?.len());
    Ok(())
}
