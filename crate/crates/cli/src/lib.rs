//! Configuration loading and pipeline orchestration for `pnp-upscale`.

pub mod config;
pub mod pipeline;

pub use config::{load_config, parse_config, ConfigError, ConfigErrors, RunConfig};
pub use pipeline::{run_pipeline, Command, Outcome, PipelineError, PipelineOptions};
