//! Experiment configuration: JSON documents referencing hardware
//! profiles, function programs (files or `preset:` names), template
//! overrides, scheduler policies, and a workload source.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{model_bytes, validate_program, FunctionProgram, HardwareProfile};
use crate::pool::{Policy, PoolConfig};
use crate::presets;
use crate::template::PrefetchSpec;
use crate::workload::FunctionMixEntry;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("program '{id}' is invalid: {first_violation}")]
    InvalidProgram { id: String, first_violation: String },
    #[error("prefetch override for '{id}' is {bytes} bytes but the model is {model} bytes")]
    OversizedPrefetch { id: String, bytes: u64, model: u64 },
    #[error("bad prefetch value '{0}' (expected a byte count, 'full', or 'eq1')")]
    BadPrefetch(String),
    #[error("config: {0}")]
    Invalid(String),
}

/// Workload source: either a CSV trace file or synthesis parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSource {
    Trace {
        path: PathBuf,
        #[serde(default = "one")]
        time_factor: f64,
        #[serde(default = "one")]
        count_factor: f64,
    },
    Synthesize {
        mix: Vec<FunctionMixEntry>,
        duration_s: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Path to a hardware profile JSON; defaults when omitted.
    #[serde(default)]
    pub hardware: Option<PathBuf>,
    /// function_id → program file path or `preset:<name>`.
    pub programs: BTreeMap<String, String>,
    /// function_id → prefetch override: byte count, "full", or "eq1".
    #[serde(default)]
    pub prefetch_overrides: BTreeMap<String, String>,
    #[serde(default = "default_policies")]
    pub policies: Vec<Policy>,
    pub workload: WorkloadSource,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_policies() -> Vec<Policy> {
    vec![Policy::Tidal]
}

/// A fully resolved experiment: every referenced file loaded and checked.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub hardware: HardwareProfile,
    pub programs: BTreeMap<String, FunctionProgram>,
    pub prefetch_overrides: BTreeMap<String, PrefetchSpec>,
    pub policies: Vec<Policy>,
    pub workload: WorkloadSource,
    pub pool: PoolConfig,
    pub seed: u64,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_prefetch(value: &str) -> Result<PrefetchSpec, ConfigError> {
    match value {
        "full" => Ok(PrefetchSpec::Full),
        "eq1" => Ok(PrefetchSpec::Eq1),
        n => n
            .parse::<u64>()
            .map(PrefetchSpec::Bytes)
            .map_err(|_| ConfigError::BadPrefetch(value.to_string())),
    }
}

/// Loads a program reference: `preset:<name>` or a JSON file path,
/// relative to `base` when relative.
pub fn load_program(reference: &str, base: &Path) -> Result<FunctionProgram, ConfigError> {
    if let Some(name) = reference.strip_prefix("preset:") {
        return presets::by_name(name).ok_or_else(|| ConfigError::UnknownPreset(name.to_string()));
    }
    let path = base.join(reference);
    let text = read(&path)?;
    FunctionProgram::from_json(&text).map_err(|e| ConfigError::Parse {
        path,
        message: e.to_string(),
    })
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = read(path)?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Resolves every reference relative to `base` and validates programs
    /// and overrides.
    pub fn resolve(&self, base: &Path) -> Result<ResolvedExperiment, ConfigError> {
        let hardware = match &self.hardware {
            Some(rel) => {
                let path = base.join(rel);
                let text = read(&path)?;
                let hw: HardwareProfile =
                    serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
                hw.validate().map_err(|m| ConfigError::Parse {
                    path,
                    message: m,
                })?;
                hw
            }
            None => HardwareProfile::default(),
        };

        if self.programs.is_empty() {
            return Err(ConfigError::Invalid("no programs configured".to_string()));
        }
        let mut programs = BTreeMap::new();
        for (id, reference) in &self.programs {
            let mut program = load_program(reference, base)?;
            program.function_id = id.clone();
            let violations = validate_program(&program);
            if let Some(v) = violations.first() {
                return Err(ConfigError::InvalidProgram {
                    id: id.clone(),
                    first_violation: v.to_string(),
                });
            }
            programs.insert(id.clone(), program);
        }

        let mut prefetch_overrides = BTreeMap::new();
        for (id, value) in &self.prefetch_overrides {
            let Some(program) = programs.get(id) else {
                return Err(ConfigError::Invalid(format!(
                    "prefetch override for unknown function '{id}'"
                )));
            };
            let spec = parse_prefetch(value)?;
            if let PrefetchSpec::Bytes(bytes) = spec {
                let model = model_bytes(program).unwrap_or(0);
                if bytes > model {
                    return Err(ConfigError::OversizedPrefetch {
                        id: id.clone(),
                        bytes,
                        model,
                    });
                }
            }
            prefetch_overrides.insert(id.clone(), spec);
        }

        if let WorkloadSource::Trace { path, time_factor, count_factor } = &self.workload {
            if *time_factor <= 0.0 || *count_factor <= 0.0 {
                return Err(ConfigError::Invalid(
                    "trace scale factors must be > 0".to_string(),
                ));
            }
            let full = base.join(path);
            if !full.exists() {
                return Err(ConfigError::Io {
                    path: full,
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing trace"),
                });
            }
        }

        Ok(ResolvedExperiment {
            hardware,
            programs,
            prefetch_overrides,
            policies: self.policies.clone(),
            workload: self.workload.clone(),
            pool: self.pool.clone(),
            seed: self.seed,
        })
    }
}
