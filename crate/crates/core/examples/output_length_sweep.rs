//! Relative throughput over forced GPU-only as outputs grow, on a GPU whose
//! memory holds a single request.
//!
//! cargo run --release --example output_length_sweep [-- num_requests]

use hybrid_serve_sim::cli::{sweep_table, SweepAxis};
use hybrid_serve_sim::{HardwareProfile, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/data/configs/output_sweep.toml"))?;
    if let Some(n) = std::env::args().nth(1) {
        cfg.workload.num_requests = n.parse()?;
    }
    let profile = HardwareProfile::load(&cfg.profile)?;
    let values = [50.0, 100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 800.0];
    let table = sweep_table(&cfg, &profile, SweepAxis::OutputLen, &values)?;
    print!("{table}");
    for r in &table.rows {
        if let Some(a) = r.strategy.gpu_cpu_power_ratio {
            let b = r.strategy.decode_intensive_fraction;
            println!("{:>5}: measured {:.3}, 1 + b/a = {:.3}", r.value, r.relative_throughput, 1.0 + b / a);
        }
    }
    Ok(())
}
