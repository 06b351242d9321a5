//! The JSON run-configuration document.
//!
//! Versioned, schema-validated on load: unknown keys are rejected by serde
//! and physical parameters are range-checked before anything runs. All
//! fields have defaults, so `{"version": 1}` is a valid document.

use serde::{Deserialize, Serialize};
use stofsi_core::driver::SchemeConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub version: u32,
    #[serde(default)]
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub ensemble: EnsembleOptions,
    #[serde(default)]
    pub studies: StudyOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleOptions {
    pub paths: usize,
    pub master_seed: u64,
    pub workers: Option<usize>,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        EnsembleOptions {
            paths: 8,
            master_seed: 0,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyOptions {
    pub penalty_kappas: Vec<f64>,
    pub refinement_steps: Vec<usize>,
    pub timeshift_multiples: Vec<usize>,
    pub difference_steps: Vec<usize>,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            penalty_kappas: vec![1e2, 1e3, 1e4],
            refinement_steps: vec![16, 32, 64],
            timeshift_multiples: vec![2, 4, 8, 16],
            difference_steps: vec![16, 32, 64],
        }
    }
}

impl RunConfigFile {
    pub fn defaults() -> Self {
        RunConfigFile {
            version: CONFIG_VERSION,
            scheme: SchemeConfig::default(),
            ensemble: EnsembleOptions::default(),
            studies: StudyOptions::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let cfg: RunConfigFile =
            serde_json::from_str(text).map_err(|e| format!("config schema: {e}"))?;
        if cfg.version != CONFIG_VERSION {
            return Err(format!(
                "config schema: unsupported version {} (expected {CONFIG_VERSION})",
                cfg.version
            ));
        }
        // range checks beyond what the scheme builder enforces
        if cfg.scheme.steps > 100_000 {
            return Err(format!(
                "config schema: steps = {} is beyond desk scale",
                cfg.scheme.steps
            ));
        }
        if cfg.ensemble.paths > 100_000 {
            return Err(format!(
                "config schema: ensemble paths = {} is beyond desk scale",
                cfg.ensemble.paths
            ));
        }
        // build once to surface physical-parameter errors at load time
        cfg.scheme.build().map_err(|e| format!("config: {e}"))?;
        Ok(cfg)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
