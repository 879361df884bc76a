//! Discrete-event engine.
//!
//! Virtual time advances one iteration at a time. Each iteration the engine
//! admits waiting requests, snapshots its queues, asks the scheduler for a
//! strategy and charges the layer-level cost of executing it:
//!
//! * GPU-only: `L·(t_lin(B) + t_gatt(B)) + overhead`.
//! * Asymmetric pipelining: the GPU runs `t_lin(sub1) + t_gatt(sub1) + t_lin(sub2)`
//!   per layer while the CPU computes attention for the offloaded requests;
//!   the iteration lasts as long as the slower lane. Offloaded requests whose
//!   earlier dispatch is still running skip the iteration.
//! * Asynchronous overlap: one linear pass over the unified batch. Attention
//!   dispatched to the CPU in one iteration is consumed at the start of a
//!   later one, and only once the CPU has finished it. The GPU never waits.
//!
//! Requests that arrive mid-iteration are logged at the next iteration
//! boundary with their own arrival time, so an `arrival` line can carry an
//! earlier timestamp than the line before it. All other events are in
//! clock order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{
    attention_rates, cpu_attention_time, gpu_attention_time, linear_time, HardwareProfile, Micros,
};
use crate::memory::{kv_tokens_needed, Device, KvAccount};
use crate::report::{RunMetrics, Summarizer};
use crate::scheduler::{
    decide_with, QueueEntry, QueueSnapshot, ScheduleError, SchedulerConfig, StrategyDecision, StrategyKind,
    StrategyOverride,
};
use crate::workload::{Request, RequestId};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("engine invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub strategy: StrategyOverride,
    pub scheduler: SchedulerConfig,
    pub activation_reserve_fraction: f64,
    /// Split prompts into chunks of at most this many tokens per iteration.
    pub prefill_chunk_tokens: Option<u32>,
    /// Model hidden size; sizes the Q/K/V and attention-output transfers.
    pub hidden_size: u32,
    pub dtype_bytes: u32,
    /// Keep the full event log in [`RunOutput::events`].
    #[serde(skip)]
    pub record_events: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            strategy: StrategyOverride::Auto,
            scheduler: SchedulerConfig::default(),
            activation_reserve_fraction: 0.10,
            prefill_chunk_tokens: None,
            hidden_size: 4096,
            dtype_bytes: 2,
            record_events: true,
        }
    }
}

impl EngineConfig {
    fn qkv_bytes_per_token(&self) -> f64 {
        3.0 * self.hidden_size as f64 * self.dtype_bytes as f64
    }

    fn out_bytes_per_token(&self) -> f64 {
        self.hidden_size as f64 * self.dtype_bytes as f64
    }
}

/// One request's share of an iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchItem {
    pub id: RequestId,
    /// Tokens fed through the linear ops.
    pub tokens: u32,
    /// KV tokens its attention reads.
    pub kv_tokens: u64,
    pub device: Device,
    pub prefill: bool,
    /// Produces a token when its attention completes (false for a
    /// non-final prefill chunk).
    pub emits: bool,
    /// Needs more tokens after this one.
    pub continues: bool,
}

impl BatchItem {
    pub fn decode(id: u64, kv_tokens: u64, device: Device) -> Self {
        BatchItem {
            id: RequestId(id),
            tokens: 1,
            kv_tokens,
            device,
            prefill: false,
            emits: true,
            continues: true,
        }
    }

    pub fn prefill(id: u64, prompt_len: u32) -> Self {
        BatchItem {
            id: RequestId(id),
            tokens: prompt_len,
            kv_tokens: prompt_len as u64,
            device: Device::Gpu,
            prefill: true,
            emits: true,
            continues: true,
        }
    }

    fn attends_on_gpu(&self) -> bool {
        self.prefill || self.device == Device::Gpu
    }
}

/// An offloaded attention computation in flight on the CPU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub start_us: f64,
    pub ready_us: f64,
}

/// The CPU as a single FIFO server plus the dispatches not yet consumed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CpuLagState {
    pub busy_until_us: f64,
    pending: BTreeMap<RequestId, Dispatch>,
}

impl CpuLagState {
    pub fn pending(&self, id: RequestId) -> Option<Dispatch> {
        self.pending.get(&id).copied()
    }

    pub fn num_pending(&self) -> usize {
        self.pending.len()
    }

    /// Layers of `id`'s outstanding dispatch the CPU has finished by `now`.
    pub fn layers_completed(&self, id: RequestId, now: f64, num_layers: u32) -> u32 {
        match self.pending.get(&id) {
            None => 0,
            Some(d) if now >= d.ready_us => num_layers,
            Some(d) if now <= d.start_us => 0,
            Some(d) => {
                let frac = (now - d.start_us) / (d.ready_us - d.start_us);
                ((frac * num_layers as f64).floor() as u32).min(num_layers)
            }
        }
    }

    fn dispatch(&mut self, ids: impl IntoIterator<Item = RequestId>, now: f64, work: Micros) -> Dispatch {
        let start_us = now.max(self.busy_until_us);
        let d = Dispatch {
            start_us,
            ready_us: start_us + work.as_f64(),
        };
        self.busy_until_us = d.ready_us;
        for id in ids {
            self.pending.insert(id, d);
        }
        d
    }

    fn take(&mut self, id: RequestId) -> Option<Dispatch> {
        self.pending.remove(&id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationOutcome {
    pub index: u64,
    pub strategy: StrategyKind,
    pub duration: Micros,
    pub tokens_emitted_gpu: u64,
    pub tokens_emitted_cpu: u64,
    pub gpu_busy: Micros,
    pub cpu_busy: Micros,
    pub transfer_time: Micros,
    /// GPU idle time spent waiting for the CPU lane.
    pub bubble: Micros,
    pub decode_only: bool,
    /// GPU/CPU attention speed ratio at this iteration's decode operating point.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rate_ratio: Option<f64>,
}

impl IterationOutcome {
    fn new(strategy: StrategyKind) -> Self {
        IterationOutcome {
            index: 0,
            strategy,
            duration: Micros::ZERO,
            tokens_emitted_gpu: 0,
            tokens_emitted_cpu: 0,
            gpu_busy: Micros::ZERO,
            cpu_busy: Micros::ZERO,
            transfer_time: Micros::ZERO,
            bubble: Micros::ZERO,
            decode_only: false,
            rate_ratio: None,
        }
    }

    pub fn tokens_emitted(&self) -> u64 {
        self.tokens_emitted_gpu + self.tokens_emitted_cpu
    }
}

/// Timing of one iteration plus which requests advanced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub outcome: IterationOutcome,
    pub emitted: Vec<(RequestId, Device)>,
    pub synced: Vec<(RequestId, Dispatch)>,
}

impl StepResult {
    fn new(strategy: StrategyKind) -> Self {
        StepResult {
            outcome: IterationOutcome::new(strategy),
            emitted: Vec::new(),
            synced: Vec::new(),
        }
    }

    fn emit(&mut self, item: &BatchItem) {
        if !item.emits {
            return;
        }
        let device = if item.attends_on_gpu() { Device::Gpu } else { Device::Cpu };
        match device {
            Device::Gpu => self.outcome.tokens_emitted_gpu += 1,
            Device::Cpu => self.outcome.tokens_emitted_cpu += 1,
        }
        self.emitted.push((item.id, device));
    }
}

fn token_sum<'a>(items: impl IntoIterator<Item = &'a BatchItem>) -> u64 {
    items.into_iter().map(|i| i.tokens as u64).sum()
}

fn op_point<'a>(items: impl IntoIterator<Item = &'a BatchItem>) -> Option<(u64, u64)> {
    let (n, kv) = items
        .into_iter()
        .fold((0u64, 0u64), |(n, kv), i| (n + 1, kv + i.kv_tokens));
    (n > 0).then_some((n, kv))
}

fn gpu_attention<'a>(profile: &HardwareProfile, items: impl IntoIterator<Item = &'a BatchItem>) -> Micros {
    op_point(items.into_iter().filter(|i| i.attends_on_gpu()))
        .map_or(Micros::ZERO, |(b, kv)| gpu_attention_time(profile, b, kv))
}

/// One PCIe transfer of `bytes`.
pub fn transfer_time(bytes: f64, profile: &HardwareProfile) -> Micros {
    profile.pcie_latency() + Micros::new(bytes / profile.pcie_bandwidth * 1e6)
}

/// Q/K/V down and attention output back up, every layer, for `tokens`
/// offloaded tokens.
pub fn offload_transfer_time(tokens: u64, profile: &HardwareProfile, cfg: &EngineConfig) -> Micros {
    if tokens == 0 {
        return Micros::ZERO;
    }
    let t = tokens as f64;
    let per_layer =
        transfer_time(t * cfg.qkv_bytes_per_token(), profile) + transfer_time(t * cfg.out_bytes_per_token(), profile);
    per_layer * profile.num_layers as f64
}

fn cpu_work<'a>(
    items: impl IntoIterator<Item = &'a BatchItem> + Clone,
    profile: &HardwareProfile,
    cfg: &EngineConfig,
) -> (Micros, Micros) {
    match op_point(items.clone()) {
        None => (Micros::ZERO, Micros::ZERO),
        Some((b, kv)) => {
            let transfer = offload_transfer_time(token_sum(items), profile, cfg);
            (cpu_attention_time(profile, b, kv) * profile.num_layers as f64 + transfer, transfer)
        }
    }
}

/// Every request runs entirely on the GPU.
pub fn step_gpu_only(batch: &[BatchItem], profile: &HardwareProfile) -> StepResult {
    assert!(!batch.is_empty(), "GPU-only step needs a non-empty batch");
    debug_assert!(batch.iter().all(BatchItem::attends_on_gpu));
    let per_layer = linear_time(profile, token_sum(batch)) + gpu_attention(profile, batch);
    let gpu = per_layer * profile.num_layers as f64 + profile.overhead();
    let mut r = StepResult::new(StrategyKind::GpuOnly);
    r.outcome.duration = gpu;
    r.outcome.gpu_busy = gpu;
    for item in batch {
        r.emit(item);
    }
    r
}

/// Two sub-batches; the second holds only CPU-attention requests and its
/// linear ops run as a separate pass. CPU requests whose earlier dispatch is
/// still running sit this iteration out.
pub fn step_asymmetric(
    sub_batch_1: &[BatchItem],
    sub_batch_2: &[BatchItem],
    profile: &HardwareProfile,
    cfg: &EngineConfig,
    lag: &mut CpuLagState,
    now: f64,
) -> StepResult {
    assert!(!sub_batch_1.is_empty() || !sub_batch_2.is_empty(), "asymmetric step needs requests");
    debug_assert!(sub_batch_2.iter().all(|i| !i.attends_on_gpu()));
    let running = |i: &&BatchItem| !i.attends_on_gpu() && lag.pending(i.id).is_some_and(|d| d.ready_us > now);
    let sub1: Vec<BatchItem> = sub_batch_1.iter().filter(|i| !running(i)).copied().collect();
    let sub2: Vec<BatchItem> = sub_batch_2.iter().filter(|i| !running(i)).copied().collect();
    if sub1.is_empty() && sub2.is_empty() {
        let next_ready = sub_batch_1
            .iter()
            .chain(sub_batch_2)
            .filter_map(|i| lag.pending(i.id))
            .map(|d| d.ready_us)
            .fold(f64::INFINITY, f64::min);
        let mut r = StepResult::new(StrategyKind::AsymmetricPipelining);
        r.outcome.duration = Micros::new(next_ready - now);
        return r;
    }
    let layers = profile.num_layers as f64;
    let per_layer = linear_time(profile, token_sum(&sub1).max(1))
        + gpu_attention(profile, &sub1)
        + linear_time(profile, token_sum(&sub2).max(1));
    let gpu_lane = per_layer * layers + profile.overhead();

    let mut r = StepResult::new(StrategyKind::AsymmetricPipelining);
    let mut fresh: Vec<&BatchItem> = Vec::new();
    for item in sub1.iter().filter(|i| !i.attends_on_gpu()).chain(&sub2) {
        match lag.take(item.id) {
            Some(d) => r.synced.push((item.id, d)),
            None => fresh.push(item),
        }
    }
    let mut cpu_end = now;
    if !fresh.is_empty() {
        let (work, transfer) = cpu_work(fresh.iter().copied(), profile, cfg);
        let d = lag.dispatch(std::iter::empty(), now, work);
        cpu_end = d.ready_us;
        r.outcome.cpu_busy = work;
        r.outcome.transfer_time = transfer;
    }
    let cpu_lane = Micros::new(cpu_end - now);
    let duration = gpu_lane.max(cpu_lane);
    r.outcome.duration = duration;
    r.outcome.gpu_busy = gpu_lane;
    r.outcome.bubble = duration - gpu_lane;
    for item in sub1.iter().chain(&sub2) {
        r.emit(item);
    }
    r
}

/// One unified linear pass. CPU requests whose previous dispatch finished
/// by `now` consume it and emit; those still running are skipped without
/// stalling the GPU; the rest dispatch new attention work.
pub fn step_async_overlap(
    gpu_set: &[BatchItem],
    cpu_set: &[BatchItem],
    profile: &HardwareProfile,
    cfg: &EngineConfig,
    lag: &mut CpuLagState,
    now: f64,
) -> StepResult {
    assert!(!gpu_set.is_empty() || !cpu_set.is_empty(), "async step needs requests");
    let mut r = StepResult::new(StrategyKind::AsyncOverlap);
    let mut ready = Vec::new();
    let mut fresh = Vec::new();
    let mut next_ready = f64::INFINITY;
    for item in cpu_set {
        match lag.pending(item.id) {
            Some(d) if d.ready_us <= now => ready.push(*item),
            Some(d) => next_ready = next_ready.min(d.ready_us),
            None => fresh.push(*item),
        }
    }
    let tokens = token_sum(gpu_set) + token_sum(&fresh) + token_sum(&ready);
    if tokens == 0 {
        // only lagging CPU requests: idle until the earliest one is ready
        r.outcome.duration = Micros::new(next_ready - now);
        return r;
    }
    let per_layer = linear_time(profile, tokens) + gpu_attention(profile, gpu_set);
    let gpu = per_layer * profile.num_layers as f64 + profile.overhead();
    r.outcome.duration = gpu;
    r.outcome.gpu_busy = gpu;

    for item in &ready {
        let d = lag.take(item.id).expect("ready item has a dispatch");
        r.synced.push((item.id, d));
    }
    let mut dispatch: Vec<BatchItem> = Vec::new();
    for item in cpu_set {
        if fresh.iter().any(|f| f.id == item.id) {
            dispatch.push(*item);
        } else if item.continues && ready.iter().any(|f| f.id == item.id) {
            dispatch.push(BatchItem {
                kv_tokens: item.kv_tokens + 1,
                ..*item
            });
        }
    }
    if !dispatch.is_empty() {
        let (work, transfer) = cpu_work(&dispatch, profile, cfg);
        lag.dispatch(dispatch.iter().map(|i| i.id), now, work);
        r.outcome.cpu_busy = work;
        r.outcome.transfer_time = transfer;
    }
    for item in gpu_set {
        r.emit(item);
    }
    for item in &ready {
        r.emit(item);
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrival,
    Admit,
    Decide,
    IterationStart,
    TokenEmit,
    Sync,
    Complete,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Detail {
    Arrival { prompt_len: u32, output_len: u32 },
    Admit { device: Device, kv_tokens: u64 },
    Reject { needed_tokens: u64 },
    Decide(Box<StrategyDecision>),
    Iteration(IterationOutcome),
    TokenEmit { device: Device, generated: u32 },
    Sync { dispatched_at_us: f64, ready_at_us: f64 },
    Complete { arrival_us: f64, output_len: u32 },
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEvent")]
pub struct Event {
    pub t_us: f64,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request_id: Option<RequestId>,
    pub detail: Detail,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    t_us: f64,
    kind: EventKind,
    #[serde(default)]
    strategy: Option<StrategyKind>,
    #[serde(default)]
    request_id: Option<RequestId>,
    detail: serde_json::Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrivalDetail {
    prompt_len: u32,
    output_len: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdmitDetail {
    device: Device,
    kv_tokens: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RejectDetail {
    needed_tokens: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenDetail {
    device: Device,
    generated: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SyncDetail {
    dispatched_at_us: f64,
    ready_at_us: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CompleteDetail {
    arrival_us: f64,
    output_len: u32,
}

impl TryFrom<RawEvent> for Event {
    type Error = serde_json::Error;

    fn try_from(raw: RawEvent) -> Result<Self, Self::Error> {
        use serde_json::from_value as v;
        let detail = match raw.kind {
            EventKind::Arrival => {
                let d: ArrivalDetail = v(raw.detail)?;
                Detail::Arrival {
                    prompt_len: d.prompt_len,
                    output_len: d.output_len,
                }
            }
            EventKind::Admit => {
                let d: AdmitDetail = v(raw.detail)?;
                Detail::Admit {
                    device: d.device,
                    kv_tokens: d.kv_tokens,
                }
            }
            EventKind::Reject => Detail::Reject {
                needed_tokens: v::<RejectDetail>(raw.detail)?.needed_tokens,
            },
            EventKind::Decide => Detail::Decide(Box::new(v(raw.detail)?)),
            EventKind::IterationStart => Detail::Iteration(v(raw.detail)?),
            EventKind::TokenEmit => {
                let d: TokenDetail = v(raw.detail)?;
                Detail::TokenEmit {
                    device: d.device,
                    generated: d.generated,
                }
            }
            EventKind::Sync => {
                let d: SyncDetail = v(raw.detail)?;
                Detail::Sync {
                    dispatched_at_us: d.dispatched_at_us,
                    ready_at_us: d.ready_at_us,
                }
            }
            EventKind::Complete => {
                let d: CompleteDetail = v(raw.detail)?;
                Detail::Complete {
                    arrival_us: d.arrival_us,
                    output_len: d.output_len,
                }
            }
        };
        Ok(Event {
            t_us: raw.t_us,
            kind: raw.kind,
            strategy: raw.strategy,
            request_id: raw.request_id,
            detail,
        })
    }
}

impl Detail {
    pub fn kind(&self) -> EventKind {
        match self {
            Detail::Arrival { .. } => EventKind::Arrival,
            Detail::Admit { .. } => EventKind::Admit,
            Detail::Reject { .. } => EventKind::Reject,
            Detail::Decide(_) => EventKind::Decide,
            Detail::Iteration(_) => EventKind::IterationStart,
            Detail::TokenEmit { .. } => EventKind::TokenEmit,
            Detail::Sync { .. } => EventKind::Sync,
            Detail::Complete { .. } => EventKind::Complete,
        }
    }
}

impl Event {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Empty unless [`EngineConfig::record_events`] is set.
    pub events: Vec<Event>,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone)]
struct Live {
    req: Request,
    device: Device,
    prefilled: u32,
    generated: u32,
}

impl Live {
    fn in_prefill(&self) -> bool {
        self.prefilled < self.req.prompt_len
    }

    fn decode_kv(&self) -> u64 {
        self.req.prompt_len as u64 + self.generated as u64
    }

    fn continues_after_next(&self) -> bool {
        self.generated + 1 < self.req.output_len
    }
}

struct Sim<'a> {
    profile: &'a HardwareProfile,
    cfg: &'a EngineConfig,
    clock: f64,
    account: KvAccount,
    lag: CpuLagState,
    live: Vec<Live>,
    waiting: Vec<Request>,
    admit_pending: bool,
    iteration: u64,
    summary: Summarizer,
    events: Vec<Event>,
}

impl<'a> Sim<'a> {
    fn record(&mut self, t_us: f64, kind: EventKind, strategy: Option<StrategyKind>, request_id: Option<RequestId>, detail: Detail) {
        let event = Event {
            t_us,
            kind,
            strategy,
            request_id,
            detail,
        };
        self.summary.push(&event);
        if self.cfg.record_events {
            self.events.push(event);
        }
    }

    fn admit(&mut self) {
        let Some(head) = self.waiting.first() else {
            return;
        };
        let need = kv_tokens_needed(head);
        let a = &self.account;
        let fits = need <= a.gpu_capacity_tokens() - a.gpu_used_tokens() || need <= a.cpu_capacity_tokens() - a.cpu_used_tokens();
        // an unchanged queue whose head fits nowhere would place nothing
        if !self.admit_pending && !fits {
            return;
        }
        self.admit_pending = false;
        let waiting = std::mem::take(&mut self.waiting);
        let refs: Vec<&Request> = waiting.iter().collect();
        let admission = self.account.admit(&refs);
        let now = self.clock;
        for p in &admission.placed {
            let req = waiting.iter().find(|r| r.id == p.request_id).expect("placed request waits").clone();
            let kv_tokens = kv_tokens_needed(&req);
            self.record(now, EventKind::Admit, None, Some(req.id), Detail::Admit {
                device: p.device,
                kv_tokens,
            });
            self.live.push(Live {
                req,
                device: p.device,
                prefilled: 0,
                generated: 0,
            });
        }
        for rej in &admission.rejected {
            self.record(now, EventKind::Reject, None, Some(rej.request_id), Detail::Reject {
                needed_tokens: rej.needed_tokens,
            });
        }
        let queued: BTreeSet<RequestId> = admission.queued.iter().copied().collect();
        self.waiting = waiting.into_iter().filter(|r| queued.contains(&r.id)).collect();
    }

    fn prefill_chunk(&self, l: &Live) -> u32 {
        let remaining = l.req.prompt_len - l.prefilled;
        remaining.min(self.cfg.prefill_chunk_tokens.unwrap_or(u32::MAX).max(1))
    }

    fn snapshot(&self) -> QueueSnapshot {
        let mut snap = QueueSnapshot {
            prefill: Vec::new(),
            gpu_decode: Vec::new(),
            cpu_decode: Vec::new(),
            num_layers: self.profile.num_layers,
            cpu_backlog_us: (self.lag.busy_until_us - self.clock).max(0.0),
        };
        let budget = self.cfg.scheduler.max_batch_tokens as u64;
        let mut used = 0u64;
        let mut prefill_open = true;
        for l in &self.live {
            if l.in_prefill() {
                let chunk = self.prefill_chunk(l);
                if prefill_open && (snap.prefill.is_empty() || used + chunk as u64 <= budget) {
                    used += chunk as u64;
                    snap.prefill
                        .push(QueueEntry::new(l.req.id.0, chunk, (l.prefilled + chunk) as u64));
                } else {
                    prefill_open = false;
                }
                continue;
            }
            let mut e = QueueEntry::new(l.req.id.0, 1, l.decode_kv());
            match l.device {
                Device::Gpu => snap.gpu_decode.push(e),
                Device::Cpu => {
                    e.awaiting_sync = self.lag.pending(l.req.id).is_some();
                    e.layers_completed = self.lag.layers_completed(l.req.id, self.clock, self.profile.num_layers);
                    snap.cpu_decode.push(e);
                }
            }
        }
        snap
    }

    fn item(&self, entry: &QueueEntry, prefill: bool) -> BatchItem {
        let l = self.live.iter().find(|l| l.req.id == entry.id).expect("snapshot entries are live");
        BatchItem {
            id: entry.id,
            tokens: entry.tokens,
            kv_tokens: entry.kv_tokens,
            device: l.device,
            prefill,
            emits: !prefill || l.prefilled + entry.tokens == l.req.prompt_len,
            continues: if prefill { l.req.output_len > 1 } else { l.continues_after_next() },
        }
    }

    fn iterate(&mut self) -> Result<(), EngineError> {
        let now = self.clock;
        let snap = self.snapshot();
        let decision = decide_with(self.cfg.strategy, &snap, self.profile, &self.cfg.scheduler)?;

        let mut items: BTreeMap<RequestId, BatchItem> = BTreeMap::new();
        for e in &snap.prefill {
            items.insert(e.id, self.item(e, true));
        }
        for e in snap.gpu_decode.iter().chain(&snap.cpu_decode) {
            items.insert(e.id, self.item(e, false));
        }
        let pick = |ids: &[RequestId]| -> Vec<BatchItem> { ids.iter().map(|id| items[id]).collect() };
        let on_gpu: Vec<BatchItem> = pick(&decision.prefill)
            .into_iter()
            .chain(pick(&decision.gpu_set))
            .collect();

        let mut result = match decision.kind {
            StrategyKind::GpuOnly => step_gpu_only(&on_gpu, self.profile),
            StrategyKind::AsymmetricPipelining => step_asymmetric(
                &pick(&decision.sub_batch_1),
                &pick(&decision.sub_batch_2),
                self.profile,
                self.cfg,
                &mut self.lag,
                now,
            ),
            StrategyKind::AsyncOverlap => step_async_overlap(
                &on_gpu,
                &pick(&decision.cpu_set),
                self.profile,
                self.cfg,
                &mut self.lag,
                now,
            ),
        };
        if !(result.outcome.duration.as_f64() > 0.0) {
            return Err(EngineError::Invariant(format!(
                "iteration {} has non-positive duration",
                self.iteration
            )));
        }
        let decode: Vec<&QueueEntry> = snap.gpu_decode.iter().chain(&snap.cpu_decode).collect();
        result.outcome.index = self.iteration;
        result.outcome.decode_only = decision.prefill.is_empty();
        result.outcome.rate_ratio = (!decode.is_empty()).then(|| {
            let kv = decode.iter().map(|e| e.kv_tokens).sum();
            attention_rates(self.profile, decode.len() as u64, kv).ratio()
        });
        self.iteration += 1;

        let kind = decision.kind;
        self.record(now, EventKind::Decide, Some(kind), None, Detail::Decide(Box::new(decision.clone())));
        self.record(now, EventKind::IterationStart, Some(kind), None, Detail::Iteration(result.outcome.clone()));
        for (id, d) in &result.synced {
            self.record(now, EventKind::Sync, Some(kind), Some(*id), Detail::Sync {
                dispatched_at_us: d.start_us,
                ready_at_us: d.ready_us,
            });
        }

        self.clock = now + result.outcome.duration.as_f64();
        let end = self.clock;
        for e in &snap.prefill {
            let l = self.live.iter_mut().find(|l| l.req.id == e.id).expect("live");
            l.prefilled += e.tokens;
        }
        for (id, device) in result.emitted {
            let idx = self.live.iter().position(|l| l.req.id == id).expect("emitting request is live");
            self.live[idx].generated += 1;
            let l = self.live[idx].clone();
            self.record(end, EventKind::TokenEmit, Some(kind), Some(id), Detail::TokenEmit {
                device,
                generated: l.generated,
            });
            if l.generated == l.req.output_len {
                self.record(end, EventKind::Complete, None, Some(id), Detail::Complete {
                    arrival_us: l.req.arrival_us,
                    output_len: l.req.output_len,
                });
                self.account
                    .release(id)
                    .map_err(|e| EngineError::Invariant(e.to_string()))?;
                self.live.remove(idx);
                self.admit_pending = true;
            }
        }
        Ok(())
    }
}

/// Simulates `requests` (any order; they are served by arrival time) on
/// `profile` to completion.
pub fn run(requests: &[Request], profile: &HardwareProfile, cfg: &EngineConfig) -> Result<RunOutput, EngineError> {
    let mut account = KvAccount::from_profile(profile, cfg.activation_reserve_fraction);
    if cfg.strategy == StrategyOverride::GpuOnlyForce {
        account = account.gpu_only();
    }
    let mut order: Vec<&Request> = requests.iter().collect();
    order.sort_by(|a, b| a.arrival_us.total_cmp(&b.arrival_us));

    let mut sim = Sim {
        profile,
        cfg,
        clock: order.first().map_or(0.0, |r| r.arrival_us),
        account,
        lag: CpuLagState::default(),
        live: Vec::new(),
        waiting: Vec::new(),
        admit_pending: false,
        iteration: 0,
        summary: Summarizer::default(),
        events: Vec::new(),
    };
    let mut next = 0;
    loop {
        while next < order.len() && order[next].arrival_us <= sim.clock {
            let r = order[next];
            sim.record(r.arrival_us, EventKind::Arrival, None, Some(r.id), Detail::Arrival {
                prompt_len: r.prompt_len,
                output_len: r.output_len,
            });
            sim.waiting.push(r.clone());
            sim.admit_pending = true;
            next += 1;
        }
        sim.admit();
        if sim.live.is_empty() {
            if next < order.len() {
                sim.clock = sim.clock.max(order[next].arrival_us);
                continue;
            }
            if !sim.waiting.is_empty() {
                return Err(EngineError::Invariant(format!(
                    "{} requests cannot be admitted into an idle system",
                    sim.waiting.len()
                )));
            }
            break;
        }
        sim.iterate()?;
    }
    Ok(RunOutput {
        metrics: sim.summary.finish(),
        events: sim.events,
    })
}
