//! Orchestration behind the `csm` binary. Each `cmd_*` function is one
//! subcommand; they are exposed here so tests can drive them directly.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{
    cmd_ablation_alignment, cmd_cis, cmd_cms, cmd_evaluate, cmd_reproject, cmd_sanity, cmd_synth, AlignmentMode,
    HeatmapSource, SynthOptions,
};
pub use config::{OracleSource, Overrides, RunConfig};
pub use error::{CliError, Result};
