//! Single runs, strategy comparisons and parameter sweeps, with their artifacts.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::cost_model::{HardwareProfile, ProfileError};
use crate::engine::{self, EngineConfig, EngineError, RunOutput};
use crate::report::{metrics_csv, metrics_json, write_events_jsonl, RunMetrics};
use crate::scheduler::StrategyOverride;
use crate::workload::{load_trace, synthesize, Request, TraceError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

/// Profile and request list shared by every run derived from one config.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub profile: HardwareProfile,
    pub requests: Vec<Request>,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let profile = HardwareProfile::load(&cfg.profile)?;
        let requests = load_requests(cfg)?;
        log::info!("{} requests, {} layers", requests.len(), profile.num_layers);
        Ok(Inputs { profile, requests })
    }
}

/// The config's trace, or its synthetic workload under its seed.
pub fn load_requests(cfg: &RunConfig) -> Result<Vec<Request>, CliError> {
    Ok(match &cfg.workload.trace {
        Some(path) => {
            let t = load_trace(path)?;
            if t.inversions > 0 {
                log::warn!("{}: {} out-of-order arrivals sorted", path.display(), t.inversions);
            }
            t.requests
        }
        None => synthesize(&cfg.workload.spec(cfg.seed)),
    })
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.display().to_string(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `events.jsonl`, `metrics.json` and `metrics.csv` into `dir`.
pub fn write_artifacts(dir: &Path, run: &str, out: &RunOutput) -> Result<(), CliError> {
    let mut events = Vec::new();
    write_events_jsonl(&out.events, &mut events).expect("writing to memory");
    write(&dir.join("events.jsonl"), std::str::from_utf8(&events).expect("json is utf-8"))?;
    write(&dir.join("metrics.json"), &metrics_json(&out.metrics))?;
    write(&dir.join("metrics.csv"), &metrics_csv([(run, &out.metrics)]))?;
    Ok(())
}

fn simulate(inputs: &Inputs, profile: &HardwareProfile, cfg: &EngineConfig) -> Result<RunOutput, CliError> {
    Ok(engine::run(&inputs.requests, profile, cfg)?)
}

/// One run with the config's strategy; artifacts go to `output_dir`.
pub fn run_once(cfg: &RunConfig) -> Result<RunMetrics, CliError> {
    let inputs = Inputs::load(cfg)?;
    let out = simulate(&inputs, &inputs.profile, &cfg.engine_config())?;
    write_artifacts(&cfg.output_dir, cfg.strategy.as_str(), &out)?;
    log::info!("wrote artifacts to {}", cfg.output_dir.display());
    Ok(out.metrics)
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub strategy: StrategyOverride,
    pub metrics: RunMetrics,
    /// Throughput change relative to the first strategy, in percent.
    pub throughput_delta_pct: f64,
    pub latency_delta_pct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

fn delta_pct(x: f64, base: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        (x / base - 1.0) * 100.0
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<18} {:>14} {:>9} {:>16} {:>9}",
            "strategy", "tokens/s", "delta", "latency us/tok", "delta"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<18} {:>14.1} {:>8.2}% {:>16.1} {:>8.2}%",
                r.strategy.as_str(),
                r.metrics.throughput_tokens_per_s,
                r.throughput_delta_pct,
                r.metrics.avg_per_token_latency_us,
                r.latency_delta_pct
            )?;
        }
        Ok(())
    }
}

/// Runs the same workload under each strategy. Each run's artifacts go to
/// `output_dir/<strategy>/`; the table to `output_dir/comparison.csv`.
pub fn compare(cfg: &RunConfig, strategies: &[StrategyOverride]) -> Result<ComparisonTable, CliError> {
    if strategies.len() < 2 {
        return Err(CliError::Usage("compare needs at least two strategies".into()));
    }
    let inputs = Inputs::load(cfg)?;
    let outs: Vec<RunOutput> = strategies
        .par_iter()
        .map(|&s| {
            let mut ec = cfg.engine_config();
            ec.strategy = s;
            simulate(&inputs, &inputs.profile, &ec)
        })
        .collect::<Result<_, _>>()?;
    let base = &outs[0].metrics;
    let rows: Vec<ComparisonRow> = strategies
        .iter()
        .zip(&outs)
        .map(|(&s, o)| ComparisonRow {
            strategy: s,
            metrics: o.metrics.clone(),
            throughput_delta_pct: delta_pct(o.metrics.throughput_tokens_per_s, base.throughput_tokens_per_s),
            latency_delta_pct: delta_pct(o.metrics.avg_per_token_latency_us, base.avg_per_token_latency_us),
        })
        .collect();
    let mut seen = Vec::new();
    for (&s, o) in strategies.iter().zip(&outs) {
        if !seen.contains(&s) {
            write_artifacts(&cfg.output_dir.join(s.as_str()), s.as_str(), o)?;
            seen.push(s);
        }
    }
    write(
        &cfg.output_dir.join("comparison.csv"),
        &metrics_csv(rows.iter().map(|r| (r.strategy.as_str(), &r.metrics))),
    )?;
    Ok(ComparisonTable { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Mean output length (distribution family kept).
    OutputLen,
    PromptLen,
    /// Multiplier on the CPU attention rate.
    CpuRateScale,
    GpuMemBytes,
    ArrivalRate,
    NumRequests,
    MinCpuGpuRatio,
    MaxBatchTokens,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::OutputLen => "output_len",
            SweepAxis::PromptLen => "prompt_len",
            SweepAxis::CpuRateScale => "cpu_rate_scale",
            SweepAxis::GpuMemBytes => "gpu_mem_bytes",
            SweepAxis::ArrivalRate => "arrival_rate",
            SweepAxis::NumRequests => "num_requests",
            SweepAxis::MinCpuGpuRatio => "min_cpu_gpu_ratio",
            SweepAxis::MaxBatchTokens => "max_batch_tokens",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let all = [
            SweepAxis::OutputLen,
            SweepAxis::PromptLen,
            SweepAxis::CpuRateScale,
            SweepAxis::GpuMemBytes,
            SweepAxis::ArrivalRate,
            SweepAxis::NumRequests,
            SweepAxis::MinCpuGpuRatio,
            SweepAxis::MaxBatchTokens,
        ];
        all.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = all.iter().map(|a| a.as_str()).collect();
            format!("unknown sweep axis `{s}` (expected one of {})", names.join(", "))
        })
    }
}

/// Applies one axis value to a config and profile.
pub fn apply_axis(
    axis: SweepAxis,
    value: f64,
    cfg: &RunConfig,
    profile: &HardwareProfile,
) -> Result<(RunConfig, HardwareProfile), CliError> {
    let mut cfg = cfg.clone();
    let mut profile = profile.clone();
    let w = &mut cfg.workload;
    if w.trace.is_some() && matches!(axis, SweepAxis::OutputLen | SweepAxis::PromptLen | SweepAxis::ArrivalRate | SweepAxis::NumRequests) {
        return Err(CliError::Usage(format!("axis {} needs a synthetic workload", axis.as_str())));
    }
    match axis {
        SweepAxis::OutputLen => w.output_len = w.output_len.with_mean(value),
        SweepAxis::PromptLen => w.prompt_len = w.prompt_len.with_mean(value),
        SweepAxis::CpuRateScale => profile = profile.with_cpu_rate_scale(value),
        SweepAxis::GpuMemBytes => profile = profile.with_gpu_mem_bytes(value),
        SweepAxis::ArrivalRate => {
            w.arrival = crate::workload::ArrivalProcess::Poisson { rate_per_s: value }
        }
        SweepAxis::NumRequests => w.num_requests = value as usize,
        SweepAxis::MinCpuGpuRatio => cfg.min_cpu_gpu_ratio = value,
        SweepAxis::MaxBatchTokens => cfg.max_batch_tokens = value as u32,
    }
    cfg.validate()?;
    Ok((cfg, profile))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub strategy: RunMetrics,
    pub baseline: RunMetrics,
    /// Throughput of the configured strategy over forced GPU-only.
    pub relative_throughput: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub strategy: StrategyOverride,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},strategy_tokens_per_s,gpu_only_tokens_per_s,relative_throughput,decode_intensive_fraction,gpu_cpu_power_ratio,speedup_estimate\n",
            self.axis.as_str()
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.value,
                r.strategy.throughput_tokens_per_s,
                r.baseline.throughput_tokens_per_s,
                r.relative_throughput,
                r.strategy.decode_intensive_fraction,
                r.strategy.gpu_cpu_power_ratio.map(|x| x.to_string()).unwrap_or_default(),
                r.strategy.speedup_estimate.map(|x| x.to_string()).unwrap_or_default(),
            ));
        }
        s
    }
}

impl fmt::Display for SweepTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>14} {:>14} {:>14} {:>9} {:>6} {:>7}",
            self.axis.as_str(),
            self.strategy.as_str(),
            "gpu_only_force",
            "relative",
            "b",
            "a"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>14} {:>14.1} {:>14.1} {:>9.4} {:>6.3} {:>7.2}",
                r.value,
                r.strategy.throughput_tokens_per_s,
                r.baseline.throughput_tokens_per_s,
                r.relative_throughput,
                r.strategy.decode_intensive_fraction,
                r.strategy.gpu_cpu_power_ratio.unwrap_or(f64::NAN)
            )?;
        }
        Ok(())
    }
}

/// Runs the sweep without touching the filesystem beyond loading inputs.
pub fn sweep_table(cfg: &RunConfig, profile: &HardwareProfile, axis: SweepAxis, values: &[f64]) -> Result<SweepTable, CliError> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let rows = values
        .par_iter()
        .map(|&value| {
            let (vcfg, vprofile) = apply_axis(axis, value, cfg, profile)?;
            let inputs = Inputs {
                profile: vprofile,
                requests: load_requests(&vcfg)?,
            };
            let mut ec = vcfg.engine_config();
            ec.record_events = false;
            let strategy = simulate(&inputs, &inputs.profile, &ec)?.metrics;
            ec.strategy = StrategyOverride::GpuOnlyForce;
            let baseline = simulate(&inputs, &inputs.profile, &ec)?.metrics;
            let relative_throughput = if baseline.throughput_tokens_per_s > 0.0 {
                strategy.throughput_tokens_per_s / baseline.throughput_tokens_per_s
            } else {
                f64::NAN
            };
            Ok(SweepRow {
                value,
                strategy,
                baseline,
                relative_throughput,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(SweepTable {
        axis,
        strategy: cfg.strategy,
        rows,
    })
}

/// One run per axis value for the configured strategy and for forced
/// GPU-only; writes `output_dir/sweep.csv` and `output_dir/sweep.json`.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepTable, CliError> {
    let profile = HardwareProfile::load(&cfg.profile)?;
    let table = sweep_table(cfg, &profile, axis, values)?;
    write(&cfg.output_dir.join("sweep.csv"), &table.to_csv())?;
    let mut json = serde_json::to_string_pretty(&table).expect("sweep serializes");
    json.push('\n');
    write(&cfg.output_dir.join("sweep.json"), &json)?;
    Ok(table)
}

/// Flag values that win over the file and environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub strategy: Option<StrategyOverride>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.strategy {
            cfg.strategy = s;
        }
    }
}

pub fn parse_list<T: std::str::FromStr<Err = E>, E: fmt::Display>(s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|e| CliError::Usage(format!("`{x}`: {e}"))))
        .collect()
}
