//! The same workload under every strategy.
//!
//! cargo run --release --example compare_strategies

use hybrid_serve_sim::cli::compare;
use hybrid_serve_sim::{RunConfig, StrategyOverride};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/data/configs/output_sweep.toml"))?;
    cfg.workload.num_requests = 600;
    cfg.output_dir = std::env::temp_dir().join("hybrid-sim-compare");
    let table = compare(
        &cfg,
        &[
            StrategyOverride::GpuOnlyForce,
            StrategyOverride::Auto,
            StrategyOverride::AsyncForce,
            StrategyOverride::AsymmetricForce,
        ],
    )?;
    print!("{table}");
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}
