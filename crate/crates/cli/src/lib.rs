//! Reproducible pipelines over the reghorizon library: corpus generation,
//! training, sweeps, regression analysis, significance testing and a
//! gradient self-check.

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::{apply_override, env_seed, ExperimentConfig, SEED_ENV};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERIC: u8 = 2;
pub const EXIT_INSUFFICIENT: u8 = 3;

/// Process exit code for an error: numeric failures give 2, too few
/// regression points 3, anything else 1.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err
        .chain()
        .find_map(|e| e.downcast_ref::<reghorizon::Error>())
    {
        Some(reghorizon::Error::Numeric(_)) => EXIT_NUMERIC,
        Some(reghorizon::Error::InsufficientData { .. }) => EXIT_INSUFFICIENT,
        _ => EXIT_USAGE,
    }
}
