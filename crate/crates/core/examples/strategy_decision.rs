//! Per-iteration strategy selection on hand-built queue snapshots.
//!
//! cargo run --example strategy_decision

use hybrid_serve_sim::scheduler::{decide, QueueEntry, QueueSnapshot, SchedulerConfig};
use hybrid_serve_sim::ProfileBuilder;

fn snapshot(gpu: u64, cpu: u64, prefill: Option<u32>) -> QueueSnapshot {
    QueueSnapshot {
        prefill: prefill.map(|t| vec![QueueEntry::new(0, t, t as u64)]).unwrap_or_default(),
        gpu_decode: (1..=gpu).map(|i| QueueEntry::new(i, 1, 2048)).collect(),
        cpu_decode: (100..100 + cpu).map(|i| QueueEntry::new(i, 1, 2048)).collect(),
        num_layers: 32,
        cpu_backlog_us: 0.0,
    }
}

fn main() {
    let cfg = SchedulerConfig::default();
    for slowdown in [4.0, 17.8] {
        let profile = ProfileBuilder::default()
            .num_layers(32)
            .linear([(1, 700.0), (128, 760.0), (2048, 7000.0)])
            .gpu_attn([(1, 1024, 40.0), (1, 1 << 20, 40960.0), (256, 1024, 40.0), (256, 1 << 20, 40960.0)])
            .cpu_attn([
                (1, 1024, 40.0 * slowdown),
                (1, 1 << 20, 40960.0 * slowdown),
                (256, 1024, 40.0 * slowdown),
                (256, 1 << 20, 40960.0 * slowdown),
            ])
            .build()
            .expect("valid profile");
        println!("CPU attention {slowdown}x slower than GPU");
        for (label, snap) in [
            ("no offloaded requests", snapshot(8, 0, None)),
            ("below the 8x gate", snapshot(8, 60, None)),
            ("decode only", snapshot(8, 64, None)),
            ("with a 1500-token prefill", snapshot(8, 64, Some(1500))),
        ] {
            let d = decide(&snap, &profile, &cfg).expect("valid snapshot");
            let why = match d.rationale.verdict {
                Some(v) => format!("lhs {:.1} vs rhs {:.1}", v.lhs, v.rhs),
                None => String::new(),
            };
            println!("  {label:<26} {:<22} {:?} {why}", d.kind.as_str(), d.rationale.rule);
        }
    }
}
