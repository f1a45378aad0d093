//! Experiment harness over the `pntk` library: TOML configs, run
//! directories, and one driver per subcommand.

pub mod artifacts;
pub mod commands;
pub mod config;

pub use artifacts::Artifacts;
pub use config::ExperimentConfig;
