//! One simulation of a synthetic Poisson workload from a TOML config.
//!
//! cargo run --example synthetic_run [-- config.toml]

use hybrid_serve_sim::cli::Inputs;
use hybrid_serve_sim::{engine, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/data/configs/reference.toml").into());
    let cfg = RunConfig::load(&path)?;
    let inputs = Inputs::load(&cfg)?;
    let out = engine::run(&inputs.requests, &inputs.profile, &cfg.engine_config())?;
    let m = &out.metrics;
    println!("{} requests, {} events", inputs.requests.len(), out.events.len());
    println!("throughput      {:.1} tokens/s", m.throughput_tokens_per_s);
    println!("latency         {:.1} ms/token", m.avg_per_token_latency_us / 1e3);
    println!("makespan        {:.2} s over {} iterations", m.makespan_us / 1e6, m.iterations);
    println!("strategies      {:?}", m.strategy_histogram);
    println!("completed {}  rejected {}", m.completed_count, m.rejected_count);
    Ok(())
}
