use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybrid_serve_sim::cli::{self, CliError, Overrides, SweepAxis};
use hybrid_serve_sim::{RunConfig, StrategyOverride};

/// Hybrid CPU-GPU LLM serving simulator.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory (overrides the config)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate once and write events.jsonl, metrics.json and metrics.csv
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<StrategyOverride>,
    },
    /// Same workload under several strategies
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated, e.g. auto,gpu_only_force
        #[arg(long)]
        strategies: String,
    },
    /// One run per value, relative to forced GPU-only
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values
        #[arg(long)]
        values: String,
        #[arg(long)]
        strategy: Option<StrategyOverride>,
    },
}

fn load(common: &Common, strategy: Option<StrategyOverride>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    Overrides {
        output_dir: common.out.clone(),
        seed: common.seed,
        strategy,
    }
    .apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Cli::parse();
    env_logger::Builder::new().filter_level(args.log_level).init();
    let result = match args.command {
        Command::Run { common, strategy } => load(&common, strategy).and_then(|cfg| {
            let m = cli::run_once(&cfg)?;
            println!(
                "{} tokens in {:.3} s: {:.1} tokens/s, {:.1} us/token",
                m.total_output_tokens,
                m.makespan_us / 1e6,
                m.throughput_tokens_per_s,
                m.avg_per_token_latency_us
            );
            Ok(())
        }),
        Command::Compare { common, strategies } => load(&common, None).and_then(|cfg| {
            let strategies = cli::parse_list::<StrategyOverride, _>(&strategies)?;
            print!("{}", cli::compare(&cfg, &strategies)?);
            Ok(())
        }),
        Command::Sweep { common, axis, values, strategy } => load(&common, strategy).and_then(|cfg| {
            let values = cli::parse_list::<f64, _>(&values)?;
            print!("{}", cli::sweep(&cfg, axis, &values)?);
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
