//! Replays a gzip-compressed JSON-lines trace and writes the event log and
//! metrics files.
//!
//! cargo run --example trace_replay [-- trace.jsonl[.gz]]

use hybrid_serve_sim::cli::write_artifacts;
use hybrid_serve_sim::workload::load_trace;
use hybrid_serve_sim::{engine, EngineConfig, EventKind, HardwareProfile};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = env!("CARGO_MANIFEST_DIR");
    let trace = std::env::args()
        .nth(1)
        .unwrap_or_else(|| format!("{dir}/data/traces/sample.jsonl.gz"));
    let loaded = load_trace(&trace)?;
    println!("{} requests ({} out of order)", loaded.requests.len(), loaded.inversions);

    let profile = HardwareProfile::load(format!("{dir}/data/profiles/reference.json"))?;
    let out = engine::run(&loaded.requests, &profile, &EngineConfig::default())?;
    let syncs = out.events.iter().filter(|e| e.kind == EventKind::Sync).count();
    println!(
        "{:.1} tokens/s, {} offloaded results consumed",
        out.metrics.throughput_tokens_per_s, syncs
    );

    let target = std::env::temp_dir().join("hybrid-sim-trace");
    write_artifacts(&target, "auto", &out)?;
    for name in ["events.jsonl", "metrics.json", "metrics.csv"] {
        let len = std::fs::metadata(target.join(name))?.len();
        println!("  {} ({len} bytes)", target.join(name).display());
    }
    Ok(())
}
