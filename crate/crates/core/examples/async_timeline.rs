//! Asynchronous overlap step by step: CPU attention dispatched in one
//! iteration is consumed by a later one without stalling the GPU.
//!
//! cargo run --example async_timeline

use hybrid_serve_sim::engine::{step_async_overlap, BatchItem, CpuLagState, EngineConfig};
use hybrid_serve_sim::memory::Device;
use hybrid_serve_sim::ProfileBuilder;

fn main() {
    let profile = ProfileBuilder::default()
        .num_layers(4)
        .linear([(1, 100.0), (64, 100.0)])
        .gpu_attn([(1, 64, 5.0), (1, 1 << 16, 500.0), (64, 64, 5.0), (64, 1 << 16, 500.0)])
        .cpu_attn([(1, 64, 20.0), (1, 1 << 16, 2000.0), (64, 64, 20.0), (64, 1 << 16, 2000.0)])
        .build()
        .expect("valid profile");
    let cfg = EngineConfig::default();
    let mut lag = CpuLagState::default();
    let gpu = [BatchItem::decode(0, 512, Device::Gpu)];
    let mut cpu = [BatchItem::decode(1, 4096, Device::Cpu), BatchItem::decode(2, 4096, Device::Cpu)];
    let mut now = 0.0;
    for i in 0..10 {
        let r = step_async_overlap(&gpu, &cpu, &profile, &cfg, &mut lag, now);
        let emitted: Vec<String> = r.emitted.iter().map(|(id, d)| format!("{id}@{d:?}")).collect();
        println!(
            "iter {i}  t={now:>7.1}  dur {:>6.1}  cpu work {:>7.1}  busy until {:>7.1}  synced {:?}  emitted {}",
            r.outcome.duration.as_f64(),
            r.outcome.cpu_busy.as_f64(),
            lag.busy_until_us,
            r.synced.iter().map(|(id, _)| *id).collect::<Vec<_>>(),
            emitted.join(" ")
        );
        for (id, _) in &r.synced {
            for c in cpu.iter_mut().filter(|c| c.id == *id) {
                c.kv_tokens += 1;
            }
        }
        now += r.outcome.duration.as_f64();
    }
}
