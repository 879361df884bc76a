//! Simulator and scheduler for LLM inference serving on a GPU with CPU
//! attention offload.
//!
//! Requests are admitted GPU-first under reserve-ahead KV accounting; those
//! that overflow GPU memory keep their KV cache in host memory and have their
//! attention computed on the CPU. Every iteration the [`scheduler`] picks one
//! of three execution strategies from profiled costs, and the [`engine`]
//! advances virtual time with layer-level timing for the chosen one.
//!
//! | module | role |
//! |---|---|
//! | [`cost_model`] | profile tables, interpolated latencies, attention rates |
//! | [`memory`] | KV-cache accounting and admission |
//! | [`scheduler`] | per-iteration strategy selection |
//! | [`engine`] | discrete-event execution and the event log |
//! | [`workload`] | traces and synthetic request streams |
//! | [`report`] | metrics from event logs |
//! | [`config`], [`cli`] | TOML run configs, runs, comparisons and sweeps |
//!
//! ```
//! use hybrid_serve_sim::{engine, EngineConfig, ProfileBuilder, Request};
//!
//! let profile = ProfileBuilder::default()
//!     .num_layers(2)
//!     .linear([(1, 100.0), (2048, 900.0)])
//!     .gpu_attn([(1, 64, 20.0), (1, 131072, 2000.0), (64, 64, 20.0), (64, 131072, 2000.0)])
//!     .cpu_attn([(1, 64, 200.0), (1, 131072, 20000.0), (64, 64, 200.0), (64, 131072, 20000.0)])
//!     .build()
//!     .unwrap();
//! let requests = vec![Request::new(0, 0.0, 16, 4), Request::new(1, 10.0, 8, 2)];
//! let out = engine::run(&requests, &profile, &EngineConfig::default()).unwrap();
//! assert_eq!(out.metrics.total_output_tokens, 6);
//! ```
//!
//! The `examples/` directory walks through each piece; `hybrid-sim` is the
//! command-line front end.

pub mod cli;
pub mod config;
pub mod cost_model;
pub mod engine;
pub mod memory;
pub mod report;
pub mod scheduler;
pub mod workload;

pub use config::RunConfig;
pub use cost_model::{HardwareProfile, Micros, ProfileBuilder};
pub use engine::{run, EngineConfig, Event, EventKind, RunOutput};
pub use memory::{Device, KvAccount};
pub use report::RunMetrics;
pub use scheduler::{decide, QueueEntry, QueueSnapshot, SchedulerConfig, StrategyDecision, StrategyKind, StrategyOverride};
pub use workload::{Request, RequestId, WorkloadSpec};
