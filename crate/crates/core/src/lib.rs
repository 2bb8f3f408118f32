pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod param;
pub mod rundir;
pub mod seed;
pub mod training;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
