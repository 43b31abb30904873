//! Tunable parameters with three-level precedence: command-line flag, then
//! JSON config file, then built-in default.

use std::path::Path;

use serde::Deserialize;

use crate::CliError;

pub mod defaults {
    pub const GAMMA: f64 = 0.3;
    pub const VAL_RATIO: f64 = 0.2;
    pub const SEEDS: [u64; 3] = [1, 2, 3];
    pub const TEMPERATURE: f64 = 1.0;
    pub const MAX_NEW: usize = 20;
    pub const WINDOW: usize = 128;
    pub const FD_EPSILON: f64 = 1e-2;
    pub const SPLIT_SEED: u64 = 0;
    pub const RANDOM_SEED: u64 = 0;
    pub const TOP_FRACTION: f64 = 0.1;
}

/// Optional overrides loaded from `--config`. Unknown keys are rejected so
/// typos fail loudly instead of silently using defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub val_ratio: Option<f64>,
    pub split_seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub temperature: Option<f64>,
    pub max_new: Option<usize>,
    pub window: Option<usize>,
    pub fd_epsilon: Option<f64>,
    pub random_seed: Option<u64>,
    pub top_fraction: Option<f64>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let bytes = std::fs::read(path).map_err(|e| {
            CliError::usage(format!("cannot read config file {}: {e}", path.display()))
        })?;
        serde_json::from_slice(&bytes).map_err(|e| {
            CliError::usage(format!("malformed config file {}: {e}", path.display()))
        })
    }
}

/// First present value wins: flag, config, default.
pub fn pick<T>(flag: Option<T>, config: Option<T>, default: T) -> T {
    flag.or(config).unwrap_or(default)
}
