//! Interpolated latencies, attention rates and the pipelining threshold for
//! the bundled reference profile.
//!
//! cargo run --example cost_model

use hybrid_serve_sim::cost_model::{
    attention_rates, cpu_attention_time, gpu_attention_time, linear_time, pipelining_threshold, HardwareProfile,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/profiles/reference.json");
    let profile = HardwareProfile::load(path)?;

    println!("linear ops per layer");
    for tokens in [1, 64, 128, 200, 512, 3000] {
        println!("  {tokens:>5} tokens  {:>8.1} us", linear_time(&profile, tokens).as_f64());
    }

    println!("attention per layer, 16 requests");
    for kv in [4096u64, 16384, 65536] {
        let g = gpu_attention_time(&profile, 16, kv);
        let c = cpu_attention_time(&profile, 16, kv);
        let r = attention_rates(&profile, 16, kv);
        println!(
            "  kv {kv:>6}  gpu {:>8.1} us  cpu {:>9.1} us  N_G/N_C = {:.2}",
            g.as_f64(),
            c.as_f64(),
            r.ratio()
        );
    }

    // offload pays off only while N_G/N_C stays below this
    let lin = linear_time(&profile, 16);
    for kv in [4096u64, 16384, 65536] {
        let att = gpu_attention_time(&profile, 16, kv);
        println!(
            "  t_gatt/t_lin = {:.2}: threshold {:.2}",
            att.as_f64() / lin.as_f64(),
            pipelining_threshold(lin, att)?
        );
    }
    Ok(())
}
