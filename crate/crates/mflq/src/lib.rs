//! Configuration, experiment orchestration, verification suites and CSV
//! output for model-free adaptive LQ control. The numerical core lives in
//! `mflq-core`.

pub mod bounds;
pub mod config;
pub mod error;
pub mod experiment;
pub mod verify;

pub use config::{load_config, parse_config, Algorithm, ExperimentConfig};
pub use error::{ConfigError, HarnessError};
