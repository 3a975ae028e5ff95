//! Orchestration behind the `bsm` binary: run configuration, the load stage,
//! subcommands and atomic output promotion.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod synth;
pub mod workspace;
