//! Per-iteration strategy selection.
//!
//! Given the prefill, GPU-decode and CPU-decode queues, the scheduler picks one
//! of three execution strategies:
//!
//! * **GPU-only**: nothing is offloaded this iteration.
//! * **Asymmetric pipelining**: the batch is split into two sub-batches so CPU
//!   attention of one overlaps GPU work of the other. Linear ops run twice per
//!   cycle.
//! * **Asynchronous overlap**: one unified batch for the linear ops; offloaded
//!   attention results are consumed one iteration later.
//!
//! The choice follows four rules: stay on the GPU while nothing is offloaded;
//! require enough CPU requests to amortize the CPU runtime; in decode-only
//! iterations pipeline only if the throughput inequality holds; with prefill
//! present use the widened CPU window in the same comparison, prioritizing
//! partially processed CPU requests when the first sub-batch is full.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{
    attention_rates, ensure_positive, gpu_attention_time, linear_time, DomainError, HardwareProfile,
    Micros,
};
use crate::workload::RequestId;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("inconsistent snapshot: request {0} appears in more than one queue")]
    DuplicateRequest(RequestId),
    #[error("inconsistent snapshot: request {id} reports {layers} completed layers of {num_layers}")]
    LayersOutOfRange { id: RequestId, layers: u32, num_layers: u32 },
    #[error("sub-batch capacity {capacity} cannot hold {required} prefill and GPU-decode tokens")]
    CapacityTooSmall { capacity: u64, required: u64 },
}

/// A request as the scheduler sees it for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub id: RequestId,
    /// Tokens this request contributes to the batched linear ops.
    pub tokens: u32,
    /// KV tokens its attention reads this iteration.
    pub kv_tokens: u64,
    /// Layers of offloaded attention already finished (CPU requests only).
    pub layers_completed: u32,
    /// An offloaded attention dispatch is still outstanding.
    pub awaiting_sync: bool,
}

impl QueueEntry {
    pub fn new(id: u64, tokens: u32, kv_tokens: u64) -> Self {
        QueueEntry {
            id: RequestId(id),
            tokens,
            kv_tokens,
            layers_completed: 0,
            awaiting_sync: false,
        }
    }

    pub fn with_layers_completed(mut self, layers: u32) -> Self {
        self.layers_completed = layers;
        self.awaiting_sync = layers > 0;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSnapshot {
    pub prefill: Vec<QueueEntry>,
    pub gpu_decode: Vec<QueueEntry>,
    pub cpu_decode: Vec<QueueEntry>,
    pub num_layers: u32,
    /// Time until the CPU finishes work already queued on it.
    #[serde(default)]
    pub cpu_backlog_us: f64,
}

impl QueueSnapshot {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let mut seen = HashSet::new();
        for e in self.prefill.iter().chain(&self.gpu_decode).chain(&self.cpu_decode) {
            if !seen.insert(e.id) {
                return Err(ScheduleError::DuplicateRequest(e.id));
            }
        }
        for e in &self.cpu_decode {
            if e.layers_completed > self.num_layers {
                return Err(ScheduleError::LayersOutOfRange {
                    id: e.id,
                    layers: e.layers_completed,
                    num_layers: self.num_layers,
                });
            }
        }
        Ok(())
    }

    fn prefill_tokens(&self) -> u64 {
        self.prefill.iter().map(|e| e.tokens as u64).sum()
    }

    fn gpu_decode_tokens(&self) -> u64 {
        self.gpu_decode.iter().map(|e| e.tokens as u64).sum()
    }

    fn decode_tokens(&self) -> u64 {
        self.gpu_decode_tokens() + self.cpu_decode.iter().map(|e| e.tokens as u64).sum::<u64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    GpuOnly,
    AsymmetricPipelining,
    AsyncOverlap,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::GpuOnly,
        StrategyKind::AsymmetricPipelining,
        StrategyKind::AsyncOverlap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::GpuOnly => "gpu_only",
            StrategyKind::AsymmetricPipelining => "asymmetric_pipelining",
            StrategyKind::AsyncOverlap => "async_overlap",
        }
    }
}

/// Whether the scheduler decides or a fixed strategy is imposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyOverride {
    #[default]
    Auto,
    GpuOnlyForce,
    AsymmetricForce,
    AsyncForce,
}

impl StrategyOverride {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyOverride::Auto => "auto",
            StrategyOverride::GpuOnlyForce => "gpu_only_force",
            StrategyOverride::AsymmetricForce => "asymmetric_force",
            StrategyOverride::AsyncForce => "async_force",
        }
    }
}

impl std::str::FromStr for StrategyOverride {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "auto" => Ok(StrategyOverride::Auto),
            "gpu_only_force" | "gpuonlyforce" | "gpu_only" => Ok(StrategyOverride::GpuOnlyForce),
            "asymmetric_force" | "asymmetricforce" | "asymmetric" => Ok(StrategyOverride::AsymmetricForce),
            "async_force" | "asyncforce" | "async" => Ok(StrategyOverride::AsyncForce),
            other => Err(format!(
                "unknown strategy `{other}` (expected auto, gpu_only_force, asymmetric_force, async_force)"
            )),
        }
    }
}

/// Quantities the pipelining inequalities compare. Rates are KV tokens per
/// microsecond; times are per layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InequalityInputs {
    pub n_g: f64,
    pub n_c: f64,
    pub t_glinear: Micros,
    pub t_gatt: Micros,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_glinear_pref: Option<Micros>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_gatt_pref: Option<Micros>,
}

impl InequalityInputs {
    pub fn decode_only(n_g: f64, n_c: f64, t_glinear: f64, t_gatt: f64) -> Self {
        InequalityInputs {
            n_g,
            n_c,
            t_glinear: Micros::new(t_glinear),
            t_gatt: Micros::new(t_gatt),
            t_glinear_pref: None,
            t_gatt_pref: None,
        }
    }

    pub fn mixed(n_g: f64, n_c: f64, t_glinear: f64, t_gatt: f64, t_glinear_pref: f64, t_gatt_pref: f64) -> Self {
        InequalityInputs {
            t_glinear_pref: Some(Micros::new(t_glinear_pref)),
            t_gatt_pref: Some(Micros::new(t_gatt_pref)),
            ..Self::decode_only(n_g, n_c, t_glinear, t_gatt)
        }
    }

    /// Per-layer time the CPU has to process offloaded attention in one
    /// pipelined cycle.
    pub fn cpu_window(&self) -> Micros {
        match (self.t_glinear_pref, self.t_gatt_pref) {
            (Some(lp), Some(ap)) => lp + self.t_glinear + ap,
            _ => self.t_glinear * 2.0 + self.t_gatt,
        }
    }
}

/// Both sides of an inequality evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub beneficial: bool,
    pub lhs: f64,
    pub rhs: f64,
}

struct Checked {
    n_g: f64,
    n_c: f64,
    lin: f64,
    att: f64,
}

fn check_common(inputs: &InequalityInputs) -> Result<Checked, DomainError> {
    Ok(Checked {
        n_g: ensure_positive("n_g", inputs.n_g)?,
        n_c: ensure_positive("n_c", inputs.n_c)?,
        lin: ensure_positive("t_glinear", inputs.t_glinear.as_f64())?,
        att: ensure_positive("t_gatt", inputs.t_gatt.as_f64())?,
    })
}

/// Decode-only test: does a pipelined cycle of `2·T_lin + T_att` process
/// tokens faster than a GPU-only iteration of `T_lin + T_att`?
/// Equality is not a benefit.
pub fn decode_only_beneficial(inputs: &InequalityInputs) -> Result<Verdict, DomainError> {
    let c = check_common(inputs)?;
    let cycle = 2.0 * c.lin + c.att;
    let lhs = (c.n_g * c.att + c.n_c * cycle) / cycle;
    let rhs = c.n_g * c.att / (c.lin + c.att);
    Ok(Verdict {
        beneficial: lhs > rhs,
        lhs,
        rhs,
    })
}

/// Mixed prefill/decode test: same comparison, but the CPU works for the
/// prefill-widened window `T_lin_pref + T_lin + T_att_pref`. The cycle-time
/// denominator stays `2·T_lin + T_att`.
pub fn mixed_beneficial(inputs: &InequalityInputs) -> Result<Verdict, DomainError> {
    let c = check_common(inputs)?;
    let lin_pref = ensure_positive(
        "t_glinear_pref",
        inputs.t_glinear_pref.map_or(0.0, Micros::as_f64),
    )?;
    let att_pref = ensure_positive("t_gatt_pref", inputs.t_gatt_pref.map_or(0.0, Micros::as_f64))?;
    let window = lin_pref + c.lin + att_pref;
    let lhs = (c.n_g * c.att + c.n_c * window) / (2.0 * c.lin + c.att);
    let rhs = c.n_g * c.att / (c.lin + c.att);
    Ok(Verdict {
        beneficial: lhs > rhs,
        lhs,
        rhs,
    })
}

/// CPU offload is worth its runtime overhead only with at least
/// `min_ratio` CPU requests per GPU request.
pub fn ratio_gate(num_cpu: usize, num_gpu: usize, min_ratio: f64) -> bool {
    num_cpu >= 1 && num_cpu as f64 >= min_ratio * num_gpu as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub min_cpu_gpu_ratio: f64,
    /// Token budget of one batched linear op; bounds the first pipelined
    /// sub-batch and the prefill tokens selected per iteration.
    pub max_batch_tokens: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            min_cpu_gpu_ratio: 8.0,
            max_batch_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    NoCpuRequests,
    RatioGate,
    DecodeOnly,
    Mixed,
    Forced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub rule: Rule,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<InequalityInputs>,
    /// KV tokens per layer the CPU can absorb in one pipelined cycle.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cpu_budget_tokens: Option<f64>,
    pub num_cpu: usize,
    pub num_gpu: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyDecision {
    pub kind: StrategyKind,
    /// Prefill requests run this iteration (also listed in `sub_batch_1`
    /// under asymmetric pipelining).
    pub prefill: Vec<RequestId>,
    pub sub_batch_1: Vec<RequestId>,
    pub sub_batch_2: Vec<RequestId>,
    pub gpu_set: Vec<RequestId>,
    pub cpu_set: Vec<RequestId>,
    /// CPU requests left out of this iteration.
    pub deferred: Vec<RequestId>,
    pub rationale: Rationale,
}

fn ids(entries: &[QueueEntry]) -> Vec<RequestId> {
    entries.iter().map(|e| e.id).collect()
}

fn op_point(entries: &[QueueEntry]) -> (u64, u64) {
    (
        entries.len() as u64,
        entries.iter().map(|e| e.kv_tokens).sum::<u64>(),
    )
}

/// Evaluates the inequality inputs for a snapshot with at least one CPU
/// request. Rates come from the CPU set's operating point; GPU attention
/// time from the GPU-decode set's (or the CPU set's when no GPU decode runs).
pub fn inequality_inputs(snapshot: &QueueSnapshot, profile: &HardwareProfile) -> InequalityInputs {
    assert!(!snapshot.cpu_decode.is_empty(), "inequality inputs need CPU requests");
    let (cb, ck) = op_point(&snapshot.cpu_decode);
    let rates = attention_rates(profile, cb, ck);
    let t_glinear = linear_time(profile, snapshot.decode_tokens().max(1));
    let t_gatt = if snapshot.gpu_decode.is_empty() {
        gpu_attention_time(profile, cb, ck)
    } else {
        let (gb, gk) = op_point(&snapshot.gpu_decode);
        gpu_attention_time(profile, gb, gk)
    };
    let mut inputs = InequalityInputs {
        n_g: rates.gpu_per_us,
        n_c: rates.cpu_per_us,
        t_glinear,
        t_gatt,
        t_glinear_pref: None,
        t_gatt_pref: None,
    };
    if !snapshot.prefill.is_empty() {
        let tokens = snapshot.prefill_tokens() + snapshot.decode_tokens();
        let (pb, pk) = op_point(&snapshot.prefill);
        let (gb, gk) = op_point(&snapshot.gpu_decode);
        inputs.t_glinear_pref = Some(linear_time(profile, tokens));
        inputs.t_gatt_pref = Some(gpu_attention_time(profile, pb + gb, pk + gk));
    }
    inputs
}

/// Splits a snapshot into pipelined sub-batches.
///
/// Sub-batch 1 holds all prefill and GPU-decode requests plus CPU-decode
/// requests in FCFS order while its token `capacity_1` has room. The rest of
/// the CPU requests form sub-batch 2, those with the most completed layers
/// first (ties keep FCFS order).
pub fn partition_asymmetric(
    snapshot: &QueueSnapshot,
    capacity_1: u64,
) -> Result<(Vec<RequestId>, Vec<RequestId>), ScheduleError> {
    let required = snapshot.prefill_tokens() + snapshot.gpu_decode_tokens();
    if capacity_1 < required {
        return Err(ScheduleError::CapacityTooSmall {
            capacity: capacity_1,
            required,
        });
    }
    let mut room = capacity_1 - required;
    let mut sub1 = ids(&snapshot.prefill);
    sub1.extend(ids(&snapshot.gpu_decode));
    let mut rest: Vec<&QueueEntry> = Vec::new();
    let mut full = false;
    for e in &snapshot.cpu_decode {
        if !full && e.tokens as u64 <= room {
            room -= e.tokens as u64;
            sub1.push(e.id);
        } else {
            full = true;
            rest.push(e);
        }
    }
    // stable: equal progress keeps FCFS order
    rest.sort_by(|a, b| b.layers_completed.cmp(&a.layers_completed));
    Ok((sub1, rest.into_iter().map(|e| e.id).collect()))
}

/// Picks CPU requests for one pipelined cycle: most completed layers first,
/// while their remaining per-layer attention work fits `budget_tokens`.
/// Returns entries in FCFS order.
fn select_for_cycle(entries: &[QueueEntry], budget_tokens: f64, num_layers: u32) -> (Vec<QueueEntry>, Vec<QueueEntry>) {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| entries[b].layers_completed.cmp(&entries[a].layers_completed));
    let mut used = 0.0;
    let mut take = vec![false; entries.len()];
    for &i in &order {
        let e = &entries[i];
        let remaining = (num_layers - e.layers_completed) as f64 / num_layers as f64;
        let cost = e.kv_tokens as f64 * remaining;
        if used + cost > budget_tokens {
            break;
        }
        used += cost;
        take[i] = true;
    }
    let (chosen, left): (Vec<_>, Vec<_>) = entries.iter().zip(take).partition(|(_, t)| *t);
    (
        chosen.into_iter().map(|(e, _)| *e).collect(),
        left.into_iter().map(|(e, _)| *e).collect(),
    )
}

fn gpu_only(snapshot: &QueueSnapshot, rationale: Rationale) -> StrategyDecision {
    StrategyDecision {
        kind: StrategyKind::GpuOnly,
        prefill: ids(&snapshot.prefill),
        sub_batch_1: Vec::new(),
        sub_batch_2: Vec::new(),
        gpu_set: ids(&snapshot.gpu_decode),
        cpu_set: Vec::new(),
        deferred: ids(&snapshot.cpu_decode),
        rationale,
    }
}

fn async_overlap(snapshot: &QueueSnapshot, rationale: Rationale) -> StrategyDecision {
    StrategyDecision {
        kind: StrategyKind::AsyncOverlap,
        prefill: ids(&snapshot.prefill),
        sub_batch_1: Vec::new(),
        sub_batch_2: Vec::new(),
        gpu_set: ids(&snapshot.gpu_decode),
        cpu_set: ids(&snapshot.cpu_decode),
        deferred: Vec::new(),
        rationale,
    }
}

fn asymmetric(
    snapshot: &QueueSnapshot,
    inputs: &InequalityInputs,
    cfg: &SchedulerConfig,
    mut rationale: Rationale,
) -> Result<StrategyDecision, ScheduleError> {
    let backlog_per_layer = snapshot.cpu_backlog_us / snapshot.num_layers as f64;
    let budget = inputs.n_c * (inputs.cpu_window().as_f64() - backlog_per_layer).max(0.0);
    let (chosen, deferred) = if snapshot.prefill.is_empty() && snapshot.gpu_decode.is_empty() {
        (snapshot.cpu_decode.clone(), Vec::new())
    } else {
        select_for_cycle(&snapshot.cpu_decode, budget, snapshot.num_layers)
    };
    let restricted = QueueSnapshot {
        cpu_decode: chosen,
        ..snapshot.clone()
    };
    let required = snapshot.prefill_tokens() + snapshot.gpu_decode_tokens();
    let capacity = (cfg.max_batch_tokens as u64).max(required);
    let (sub1, sub2) = partition_asymmetric(&restricted, capacity)?;
    rationale.cpu_budget_tokens = Some(budget);
    Ok(StrategyDecision {
        kind: StrategyKind::AsymmetricPipelining,
        prefill: ids(&snapshot.prefill),
        sub_batch_1: sub1,
        sub_batch_2: sub2,
        gpu_set: ids(&snapshot.gpu_decode),
        cpu_set: ids(&restricted.cpu_decode),
        deferred: ids(&deferred),
        rationale,
    })
}

fn base_rationale(rule: Rule, snapshot: &QueueSnapshot) -> Rationale {
    Rationale {
        rule,
        verdict: None,
        inputs: None,
        cpu_budget_tokens: None,
        num_cpu: snapshot.cpu_decode.len(),
        num_gpu: snapshot.gpu_decode.len(),
    }
}

/// Chooses the strategy for one iteration.
pub fn decide(
    snapshot: &QueueSnapshot,
    profile: &HardwareProfile,
    cfg: &SchedulerConfig,
) -> Result<StrategyDecision, ScheduleError> {
    snapshot.validate()?;
    if snapshot.cpu_decode.is_empty() {
        return Ok(gpu_only(snapshot, base_rationale(Rule::NoCpuRequests, snapshot)));
    }
    if !ratio_gate(snapshot.cpu_decode.len(), snapshot.gpu_decode.len(), cfg.min_cpu_gpu_ratio) {
        return Ok(gpu_only(snapshot, base_rationale(Rule::RatioGate, snapshot)));
    }
    let inputs = inequality_inputs(snapshot, profile);
    let (rule, verdict) = if snapshot.prefill.is_empty() {
        (Rule::DecodeOnly, decode_only_beneficial(&inputs)?)
    } else {
        (Rule::Mixed, mixed_beneficial(&inputs)?)
    };
    let rationale = Rationale {
        verdict: Some(verdict),
        inputs: Some(inputs),
        ..base_rationale(rule, snapshot)
    };
    if verdict.beneficial {
        asymmetric(snapshot, &inputs, cfg, rationale)
    } else {
        Ok(async_overlap(snapshot, rationale))
    }
}

/// Applies `strategy`: `Auto` defers to [`decide`]; forced strategies skip
/// the rules but fall back to GPU-only when there is nothing to offload.
pub fn decide_with(
    strategy: StrategyOverride,
    snapshot: &QueueSnapshot,
    profile: &HardwareProfile,
    cfg: &SchedulerConfig,
) -> Result<StrategyDecision, ScheduleError> {
    if strategy == StrategyOverride::Auto {
        return decide(snapshot, profile, cfg);
    }
    snapshot.validate()?;
    if snapshot.cpu_decode.is_empty() {
        return Ok(gpu_only(snapshot, base_rationale(Rule::NoCpuRequests, snapshot)));
    }
    let rationale = base_rationale(Rule::Forced, snapshot);
    match strategy {
        StrategyOverride::GpuOnlyForce => Ok(gpu_only(snapshot, rationale)),
        StrategyOverride::AsyncForce => Ok(async_overlap(snapshot, rationale)),
        StrategyOverride::AsymmetricForce => {
            let inputs = inequality_inputs(snapshot, profile);
            let rationale = Rationale {
                inputs: Some(inputs),
                ..rationale
            };
            asymmetric(snapshot, &inputs, cfg, rationale)
        }
        StrategyOverride::Auto => unreachable!(),
    }
}
