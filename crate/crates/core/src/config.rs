//! Run configuration: a TOML file, environment overrides, then CLI flags.
//!
//! Every key has a default, so the smallest useful config is one line:
//!
//! ```toml
//! profile = "profiles/reference.json"
//! ```
//!
//! Environment variables prefixed with `HYBRID_SIM_` override file values.
//! The rest of the name is the lower-cased key, with `__` separating nested
//! tables: `HYBRID_SIM_SEED=7`, `HYBRID_SIM_WORKLOAD__NUM_REQUESTS=50`.
//! Values are parsed as TOML and fall back to plain strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineConfig;
use crate::scheduler::{SchedulerConfig, StrategyOverride};
use crate::workload::{ArrivalProcess, LengthDist, WorkloadSpec};

pub const ENV_PREFIX: &str = "HYBRID_SIM_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    /// JSON-lines trace; when set the synthetic fields are ignored.
    pub trace: Option<PathBuf>,
    pub num_requests: usize,
    pub arrival: ArrivalProcess,
    pub prompt_len: LengthDist,
    pub output_len: LengthDist,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            trace: None,
            num_requests: 64,
            arrival: ArrivalProcess::Poisson { rate_per_s: 20.0 },
            prompt_len: LengthDist::Constant { value: 512 },
            output_len: LengthDist::Constant { value: 128 },
        }
    }
}

impl WorkloadConfig {
    pub fn spec(&self, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            arrival: self.arrival.clone(),
            prompt_len: self.prompt_len.clone(),
            output_len: self.output_len.clone(),
            num_requests: self.num_requests,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: PathBuf,
    pub workload: WorkloadConfig,
    pub strategy: StrategyOverride,
    pub min_cpu_gpu_ratio: f64,
    pub max_batch_tokens: u32,
    pub activation_reserve_fraction: f64,
    pub prefill_chunk_tokens: Option<u32>,
    pub hidden_size: u32,
    pub dtype_bytes: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let engine = EngineConfig::default();
        RunConfig {
            profile: PathBuf::from("profile.json"),
            workload: WorkloadConfig::default(),
            strategy: StrategyOverride::Auto,
            min_cpu_gpu_ratio: engine.scheduler.min_cpu_gpu_ratio,
            max_batch_tokens: engine.scheduler.max_batch_tokens,
            activation_reserve_fraction: engine.activation_reserve_fraction,
            prefill_chunk_tokens: None,
            hidden_size: engine.hidden_size,
            dtype_bytes: engine.dtype_bytes,
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_env(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_ascii_lowercase(), v)))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<&str> = key.split("__").collect();
        let (last, parents) = path.split_last().expect("split yields one part");
        let mut node = &mut *table;
        for p in parents {
            let entry = node
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| ConfigError::Invalid(format!("{ENV_PREFIX}{}: `{p}` is not a table", key.to_uppercase())))?;
        }
        node.insert(last.to_string(), env_value(&raw));
    }
    Ok(())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Parses `text`, applies `env` overrides and resolves relative paths
    /// against `base_dir`.
    pub fn from_toml_str(
        text: &str,
        base_dir: &Path,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text)?;
        apply_env(&mut table, env)?;
        let mut cfg: RunConfig = toml::Value::Table(table).try_into()?;
        cfg.profile = resolve(base_dir, &cfg.profile);
        cfg.output_dir = resolve(base_dir, &cfg.output_dir);
        if let Some(t) = &cfg.workload.trace {
            cfg.workload.trace = Some(resolve(base_dir, t));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` with overrides from the process environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, std::env::vars())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.min_cpu_gpu_ratio > 0.0) {
            return bad(format!("min_cpu_gpu_ratio must be positive, got {}", self.min_cpu_gpu_ratio));
        }
        if self.max_batch_tokens == 0 {
            return bad("max_batch_tokens must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.activation_reserve_fraction) {
            return bad(format!(
                "activation_reserve_fraction must be in [0, 1), got {}",
                self.activation_reserve_fraction
            ));
        }
        if self.prefill_chunk_tokens == Some(0) {
            return bad("prefill_chunk_tokens must be at least 1".into());
        }
        if self.workload.trace.is_none() {
            self.workload.spec(self.seed).validate().map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            strategy: self.strategy,
            scheduler: SchedulerConfig {
                min_cpu_gpu_ratio: self.min_cpu_gpu_ratio,
                max_batch_tokens: self.max_batch_tokens,
            },
            activation_reserve_fraction: self.activation_reserve_fraction,
            prefill_chunk_tokens: self.prefill_chunk_tokens,
            hidden_size: self.hidden_size,
            dtype_bytes: self.dtype_bytes,
            record_events: true,
        }
    }
}
