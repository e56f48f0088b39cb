//! The `dvaegan` command: synthesize data, train, reconstruct, evaluate and rate.

mod commands;
pub mod config;

pub use commands::{exit_code, read_recons, run, write_recons, Cli, Command, ReconIndex, RECON_INDEX};
