//! Experiment configuration, the subcommand pipeline and the efficiency
//! calculator behind the `dartlab` binary.

pub mod config;
pub mod efficiency;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use pipeline::Run;
