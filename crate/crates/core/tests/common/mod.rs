//! Shared test helpers: a from-scratch reference simulator and small
//! profile/request builders.

#![allow(dead_code)]

use hybrid_serve_sim::cost_model::{
    attention_rates, cpu_attention_time, gpu_attention_time, linear_time, HardwareProfile, Micros, ProfileBuilder,
};
use hybrid_serve_sim::engine::{Detail, EngineConfig, Event, EventKind, IterationOutcome};
use hybrid_serve_sim::memory::Device;
use hybrid_serve_sim::scheduler::{decide_with, QueueEntry, QueueSnapshot, StrategyKind, StrategyOverride};
use hybrid_serve_sim::workload::{Request, RequestId};

/// Profile whose KV capacities are exactly `gpu_tokens` and `cpu_tokens`
/// with a zero activation reserve (1 byte per KV token).
pub fn tiny_profile(layers: u32, cpu_slowdown: f64, gpu_tokens: u64, cpu_tokens: u64) -> HardwareProfile {
    let weights = 1000.0;
    let g = |b: u64, kv: u64, base: f64| (b, kv, base + 0.5 * kv as f64 + 2.0 * b as f64);
    ProfileBuilder::default()
        .num_layers(layers)
        .weights_bytes(weights)
        .gpu_mem_bytes(weights + gpu_tokens as f64)
        .cpu_mem_bytes((cpu_tokens as f64).max(0.5))
        .kv_bytes_per_token(1.0)
        .pcie(4.0e9, 1.5)
        .overhead_us(7.0)
        .linear([(1, 100.0), (8, 180.0)])
        .gpu_attn([g(1, 4, 10.0), g(1, 64, 10.0), g(4, 4, 10.0), g(4, 64, 10.0)])
        .cpu_attn([
            (1, 4, 10.0 * cpu_slowdown),
            (1, 64, 40.0 * cpu_slowdown),
            (4, 4, 16.0 * cpu_slowdown),
            (4, 64, 70.0 * cpu_slowdown),
        ])
        .build()
        .unwrap()
}

#[derive(Debug, Clone)]
struct Slot {
    req: Request,
    device: Device,
    prefilled: u32,
    generated: u32,
}

#[derive(Debug, Clone, Copy)]
struct Item {
    id: RequestId,
    tokens: u64,
    kv: u64,
    on_gpu: bool,
    emits: bool,
    continues: bool,
}

#[derive(Debug, Clone, Copy)]
struct Inflight {
    id: RequestId,
    start: f64,
    ready: f64,
}

/// Reference simulator written independently of the engine: admission every
/// iteration, per-layer cost accumulation, explicit in-flight list.
pub struct Oracle<'a> {
    p: &'a HardwareProfile,
    cfg: &'a EngineConfig,
    gpu_free: u64,
    cpu_free: u64,
    gpu_cap: u64,
    cpu_cap: u64,
    live: Vec<Slot>,
    waiting: Vec<Request>,
    inflight: Vec<Inflight>,
    cpu_free_at: f64,
    now: f64,
    iterations: u64,
    pub log: Vec<Event>,
}

fn ev(t_us: f64, kind: EventKind, strategy: Option<StrategyKind>, id: Option<RequestId>, detail: Detail) -> Event {
    Event {
        t_us,
        kind,
        strategy,
        request_id: id,
        detail,
    }
}

fn sum_layers(layers: u32, per_layer: Micros) -> Micros {
    let mut t = Micros::ZERO;
    for _ in 0..layers {
        t = t + per_layer;
    }
    t
}

impl<'a> Oracle<'a> {
    pub fn new(p: &'a HardwareProfile, cfg: &'a EngineConfig) -> Self {
        let free = p.gpu_mem_bytes - p.weights_bytes - cfg.activation_reserve_fraction * p.gpu_mem_bytes;
        let gpu_cap = (free.max(0.0) / p.kv_bytes_per_token).floor() as u64;
        let mut cpu_cap = (p.cpu_mem_bytes / p.kv_bytes_per_token).floor() as u64;
        if cfg.strategy == StrategyOverride::GpuOnlyForce {
            cpu_cap = 0;
        }
        Oracle {
            p,
            cfg,
            gpu_free: gpu_cap,
            cpu_free: cpu_cap,
            gpu_cap,
            cpu_cap,
            live: Vec::new(),
            waiting: Vec::new(),
            inflight: Vec::new(),
            cpu_free_at: 0.0,
            now: 0.0,
            iterations: 0,
            log: Vec::new(),
        }
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    fn admit(&mut self) {
        let mut gpu_ok = true;
        let mut stuck = false;
        let mut keep = Vec::new();
        let mut rejects = Vec::new();
        for r in std::mem::take(&mut self.waiting) {
            let need = r.prompt_len as u64 + r.output_len as u64;
            if need > self.gpu_cap && need > self.cpu_cap {
                rejects.push((r.id, need));
                continue;
            }
            if stuck {
                keep.push(r);
                continue;
            }
            let device = if gpu_ok && need <= self.gpu_free {
                self.gpu_free -= need;
                Device::Gpu
            } else {
                gpu_ok = false;
                if need > self.cpu_free {
                    stuck = true;
                    keep.push(r);
                    continue;
                }
                self.cpu_free -= need;
                Device::Cpu
            };
            self.log.push(ev(self.now, EventKind::Admit, None, Some(r.id), Detail::Admit { device, kv_tokens: need }));
            self.live.push(Slot {
                req: r,
                device,
                prefilled: 0,
                generated: 0,
            });
        }
        for (id, needed_tokens) in rejects {
            self.log.push(ev(self.now, EventKind::Reject, None, Some(id), Detail::Reject { needed_tokens }));
        }
        self.waiting = keep;
    }

    fn progress(&self, id: RequestId) -> u32 {
        let l = self.p.num_layers;
        match self.inflight.iter().find(|f| f.id == id) {
            None => 0,
            Some(f) if self.now >= f.ready => l,
            Some(f) if self.now <= f.start => 0,
            Some(f) => (((self.now - f.start) / (f.ready - f.start) * l as f64).floor() as u32).min(l),
        }
    }

    fn inflight_of(&self, id: RequestId) -> Option<Inflight> {
        self.inflight.iter().copied().find(|f| f.id == id)
    }

    fn snapshot(&self) -> QueueSnapshot {
        let mut s = QueueSnapshot {
            prefill: vec![],
            gpu_decode: vec![],
            cpu_decode: vec![],
            num_layers: self.p.num_layers,
            cpu_backlog_us: (self.cpu_free_at - self.now).max(0.0),
        };
        let cap = self.cfg.scheduler.max_batch_tokens as u64;
        let mut taken = 0u64;
        let mut closed = false;
        for sl in &self.live {
            if sl.prefilled < sl.req.prompt_len {
                let left = sl.req.prompt_len - sl.prefilled;
                let chunk = match self.cfg.prefill_chunk_tokens {
                    Some(c) => left.min(c.max(1)),
                    None => left,
                };
                if closed {
                    continue;
                }
                if !s.prefill.is_empty() && taken + chunk as u64 > cap {
                    closed = true;
                    continue;
                }
                taken += chunk as u64;
                s.prefill.push(QueueEntry::new(sl.req.id.0, chunk, (sl.prefilled + chunk) as u64));
                continue;
            }
            let kv = sl.req.prompt_len as u64 + sl.generated as u64;
            let mut e = QueueEntry::new(sl.req.id.0, 1, kv);
            if sl.device == Device::Gpu {
                s.gpu_decode.push(e);
            } else {
                e.awaiting_sync = self.inflight_of(sl.req.id).is_some();
                e.layers_completed = self.progress(sl.req.id);
                s.cpu_decode.push(e);
            }
        }
        s
    }

    fn item(&self, e: &QueueEntry, prefill: bool) -> Item {
        let sl = self.live.iter().find(|s| s.req.id == e.id).unwrap();
        Item {
            id: e.id,
            tokens: e.tokens as u64,
            kv: e.kv_tokens,
            on_gpu: prefill || sl.device == Device::Gpu,
            emits: if prefill { sl.prefilled + e.tokens == sl.req.prompt_len } else { true },
            continues: if prefill { sl.req.output_len > 1 } else { sl.generated + 1 < sl.req.output_len },
        }
    }

    fn gatt(&self, items: &[Item]) -> Micros {
        let gpu: Vec<&Item> = items.iter().filter(|i| i.on_gpu).collect();
        if gpu.is_empty() {
            return Micros::ZERO;
        }
        gpu_attention_time(self.p, gpu.len() as u64, gpu.iter().map(|i| i.kv).sum())
    }

    fn xfer(&self, bytes: f64) -> Micros {
        Micros::new(self.p.pcie_latency_us + bytes / self.p.pcie_bandwidth * 1e6)
    }

    /// Starts CPU attention for `items`; returns (start, ready, work, transfer).
    fn cpu_start(&mut self, items: &[Item]) -> (f64, f64, Micros, Micros) {
        let b = items.len() as u64;
        let kv: u64 = items.iter().map(|i| i.kv).sum();
        let tokens: u64 = items.iter().map(|i| i.tokens).sum();
        let h = self.cfg.hidden_size as f64 * self.cfg.dtype_bytes as f64;
        let per_layer_xfer = self.xfer(tokens as f64 * 3.0 * h) + self.xfer(tokens as f64 * h);
        let transfer = sum_layers(self.p.num_layers, per_layer_xfer);
        let work = sum_layers(self.p.num_layers, cpu_attention_time(self.p, b, kv)) + transfer;
        let start = self.now.max(self.cpu_free_at);
        let ready = start + work.as_f64();
        self.cpu_free_at = ready;
        (start, ready, work, transfer)
    }

    fn blank(kind: StrategyKind) -> IterationOutcome {
        IterationOutcome {
            index: 0,
            strategy: kind,
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

    fn iterate(&mut self) -> Result<(), String> {
        let snap = self.snapshot();
        let d = decide_with(self.cfg.strategy, &snap, self.p, &self.cfg.scheduler).map_err(|e| e.to_string())?;
        let find = |id: &RequestId| -> (&QueueEntry, bool) {
            if let Some(e) = snap.prefill.iter().find(|e| e.id == *id) {
                return (e, true);
            }
            (snap.gpu_decode.iter().chain(&snap.cpu_decode).find(|e| e.id == *id).unwrap(), false)
        };
        let items = |ids: &[RequestId]| -> Vec<Item> {
            ids.iter()
                .map(|id| {
                    let (e, pre) = find(id);
                    self.item(e, pre)
                })
                .collect()
        };
        let layers = self.p.num_layers;
        let mut out = Self::blank(d.kind);
        let mut emitted: Vec<Item> = Vec::new();
        let mut synced: Vec<Inflight> = Vec::new();
        match d.kind {
            StrategyKind::GpuOnly => {
                let batch: Vec<Item> = items(&d.prefill).into_iter().chain(items(&d.gpu_set)).collect();
                let tok: u64 = batch.iter().map(|i| i.tokens).sum();
                let t = sum_layers(layers, linear_time(self.p, tok) + self.gatt(&batch)) + self.p.overhead();
                out.duration = t;
                out.gpu_busy = t;
                emitted = batch;
            }
            StrategyKind::AsymmetricPipelining => {
                let now = self.now;
                let busy = |i: &Item, me: &Self| !i.on_gpu && me.inflight_of(i.id).is_some_and(|f| f.ready > now);
                let all1 = items(&d.sub_batch_1);
                let all2 = items(&d.sub_batch_2);
                let s1: Vec<Item> = all1.iter().copied().filter(|i| !busy(i, self)).collect();
                let s2: Vec<Item> = all2.iter().copied().filter(|i| !busy(i, self)).collect();
                if s1.is_empty() && s2.is_empty() {
                    let wake = all1
                        .iter()
                        .chain(&all2)
                        .filter_map(|i| self.inflight_of(i.id))
                        .map(|f| f.ready)
                        .fold(f64::INFINITY, f64::min);
                    out.duration = Micros::new(wake - now);
                } else {
                    let t1: u64 = s1.iter().map(|i| i.tokens).sum();
                    let t2: u64 = s2.iter().map(|i| i.tokens).sum();
                    let lane = linear_time(self.p, t1.max(1)) + self.gatt(&s1) + linear_time(self.p, t2.max(1));
                    let gpu = sum_layers(layers, lane) + self.p.overhead();
                    let mut fresh = Vec::new();
                    for i in s1.iter().filter(|i| !i.on_gpu).chain(&s2) {
                        match self.inflight_of(i.id) {
                            Some(f) => {
                                self.inflight.retain(|g| g.id != i.id);
                                synced.push(f);
                            }
                            None => fresh.push(*i),
                        }
                    }
                    let mut cpu_lane = Micros::ZERO;
                    if !fresh.is_empty() {
                        let (_, ready, work, transfer) = self.cpu_start(&fresh);
                        cpu_lane = Micros::new(ready - now);
                        out.cpu_busy = work;
                        out.transfer_time = transfer;
                    }
                    out.duration = gpu.max(cpu_lane);
                    out.gpu_busy = gpu;
                    out.bubble = out.duration - gpu;
                    emitted = s1.into_iter().chain(s2).collect();
                }
            }
            StrategyKind::AsyncOverlap => {
                let now = self.now;
                let gpu_items: Vec<Item> = items(&d.prefill).into_iter().chain(items(&d.gpu_set)).collect();
                let cpu_items = items(&d.cpu_set);
                let mut ready = Vec::new();
                let mut fresh = Vec::new();
                let mut wake = f64::INFINITY;
                for i in &cpu_items {
                    match self.inflight_of(i.id) {
                        Some(f) if f.ready <= now => ready.push(*i),
                        Some(f) => wake = wake.min(f.ready),
                        None => fresh.push(*i),
                    }
                }
                let tok: u64 = gpu_items.iter().chain(&fresh).chain(&ready).map(|i| i.tokens).sum();
                if tok == 0 {
                    out.duration = Micros::new(wake - now);
                } else {
                    let gpu = sum_layers(layers, linear_time(self.p, tok) + self.gatt(&gpu_items)) + self.p.overhead();
                    out.duration = gpu;
                    out.gpu_busy = gpu;
                    for i in &ready {
                        let f = self.inflight_of(i.id).unwrap();
                        self.inflight.retain(|g| g.id != i.id);
                        synced.push(f);
                    }
                    let mut next: Vec<Item> = Vec::new();
                    for i in &cpu_items {
                        if fresh.iter().any(|f| f.id == i.id) {
                            next.push(*i);
                        } else if i.continues && ready.iter().any(|r| r.id == i.id) {
                            next.push(Item { kv: i.kv + 1, ..*i });
                        }
                    }
                    if !next.is_empty() {
                        let (start, rdy, work, transfer) = self.cpu_start(&next);
                        for i in &next {
                            self.inflight.push(Inflight {
                                id: i.id,
                                start,
                                ready: rdy,
                            });
                        }
                        out.cpu_busy = work;
                        out.transfer_time = transfer;
                    }
                    emitted = gpu_items.into_iter().chain(ready).collect();
                }
            }
        }
        emitted.retain(|i| i.emits);
        out.tokens_emitted_gpu = emitted.iter().filter(|i| i.on_gpu).count() as u64;
        out.tokens_emitted_cpu = emitted.iter().filter(|i| !i.on_gpu).count() as u64;
        if out.duration.as_f64() <= 0.0 || out.duration.as_f64().is_nan() {
            return Err(format!("iteration {} has non-positive duration", self.iterations));
        }
        out.index = self.iterations;
        out.decode_only = d.prefill.is_empty();
        let dec: Vec<&QueueEntry> = snap.gpu_decode.iter().chain(&snap.cpu_decode).collect();
        if !dec.is_empty() {
            let kv: u64 = dec.iter().map(|e| e.kv_tokens).sum();
            out.rate_ratio = Some(attention_rates(self.p, dec.len() as u64, kv).ratio());
        }
        self.iterations += 1;

        let kind = d.kind;
        let now = self.now;
        let end = now + out.duration.as_f64();
        self.log.push(ev(now, EventKind::Decide, Some(kind), None, Detail::Decide(Box::new(d))));
        self.log.push(ev(now, EventKind::IterationStart, Some(kind), None, Detail::Iteration(out)));
        for f in &synced {
            self.log.push(ev(now, EventKind::Sync, Some(kind), Some(f.id), Detail::Sync {
                dispatched_at_us: f.start,
                ready_at_us: f.ready,
            }));
        }
        self.now = end;
        for e in &snap.prefill {
            self.live.iter_mut().find(|s| s.req.id == e.id).unwrap().prefilled += e.tokens;
        }
        for i in emitted {
            let pos = self.live.iter().position(|s| s.req.id == i.id).unwrap();
            self.live[pos].generated += 1;
            let sl = self.live[pos].clone();
            let device = if i.on_gpu { Device::Gpu } else { Device::Cpu };
            self.log.push(ev(end, EventKind::TokenEmit, Some(kind), Some(i.id), Detail::TokenEmit {
                device,
                generated: sl.generated,
            }));
            if sl.generated == sl.req.output_len {
                self.log.push(ev(end, EventKind::Complete, None, Some(i.id), Detail::Complete {
                    arrival_us: sl.req.arrival_us,
                    output_len: sl.req.output_len,
                }));
                let need = sl.req.prompt_len as u64 + sl.req.output_len as u64;
                match sl.device {
                    Device::Gpu => self.gpu_free += need,
                    Device::Cpu => self.cpu_free += need,
                }
                self.live.remove(pos);
            }
        }
        Ok(())
    }

    /// Runs to completion, or stops with an error after `max_iterations`.
    pub fn run(mut self, requests: &[Request], max_iterations: u64) -> Result<Self, String> {
        let mut pending: Vec<Request> = requests.to_vec();
        pending.sort_by(|a, b| a.arrival_us.total_cmp(&b.arrival_us));
        pending.reverse();
        self.now = pending.last().map_or(0.0, |r| r.arrival_us);
        loop {
            while pending.last().is_some_and(|r| r.arrival_us <= self.now) {
                let r = pending.pop().unwrap();
                self.log.push(ev(r.arrival_us, EventKind::Arrival, None, Some(r.id), Detail::Arrival {
                    prompt_len: r.prompt_len,
                    output_len: r.output_len,
                }));
                self.waiting.push(r);
            }
            self.admit();
            if self.live.is_empty() {
                if let Some(r) = pending.last() {
                    self.now = self.now.max(r.arrival_us);
                    continue;
                }
                if !self.waiting.is_empty() {
                    return Err("requests cannot be admitted into an idle system".into());
                }
                return Ok(self);
            }
            if self.iterations >= max_iterations {
                return Err(format!("more than {max_iterations} iterations"));
            }
            self.iterate()?;
        }
    }
}

#[derive(Debug, Default)]
pub struct Sweep {
    pub instances: u64,
    /// Instances that finish within five iterations.
    pub short: u64,
    pub with_sync: u64,
    pub with_reject: u64,
    pub errors_agreed: u64,
    pub by_kind: [u64; 3],
    pub mismatches: Vec<String>,
}

fn kind_slot(k: StrategyKind) -> usize {
    match k {
        StrategyKind::GpuOnly => 0,
        StrategyKind::AsymmetricPipelining => 1,
        StrategyKind::AsyncOverlap => 2,
    }
}

fn first_difference(a: &[Event], b: &[Event]) -> String {
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return format!("event {i}:\n  engine {}\n  oracle {}", x.to_json_line(), y.to_json_line());
        }
    }
    format!("lengths {} vs {}", a.len(), b.len())
}

/// Every combination of up to three requests (prompt 1 or 3, output 1, 2 or
/// 4, arriving at 0 or 700 us), one or two layers, two CPU speeds, four
/// memory splits, whole or chunked prefill and the three forced strategies.
pub fn exhaustive_sweep() -> Sweep {
    let mut sweep = Sweep::default();
    let shapes: Vec<(u32, u32, f64)> = [1u32, 3]
        .iter()
        .flat_map(|&p| [1u32, 2, 4].into_iter().map(move |o| (p, o)))
        .flat_map(|(p, o)| [0.0, 700.0].into_iter().map(move |a| (p, o, a)))
        .collect();
    let mut workloads: Vec<Vec<Request>> = Vec::new();
    for n in 1..=3usize {
        let mut idx = vec![0usize; n];
        loop {
            if shapes[idx[0]].2 == 0.0 {
                workloads.push(
                    idx.iter()
                        .enumerate()
                        .map(|(k, &s)| Request::new(k as u64, shapes[s].2, shapes[s].0, shapes[s].1))
                        .collect(),
                );
            }
            let mut k = 0;
            while k < n {
                idx[k] += 1;
                if idx[k] < shapes.len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
    }
    let strategies = [StrategyOverride::GpuOnlyForce, StrategyOverride::AsymmetricForce, StrategyOverride::AsyncForce];
    for layers in [1u32, 2] {
        for slowdown in [1.5, 12.0] {
            for (gpu_tokens, cpu_tokens) in [(4u64, 0u64), (4, 40), (7, 40), (40, 40)] {
                let profile = tiny_profile(layers, slowdown, gpu_tokens, cpu_tokens);
                for chunk in [None, Some(2)] {
                    for strategy in strategies {
                        let mut cfg = EngineConfig {
                            strategy,
                            activation_reserve_fraction: 0.0,
                            prefill_chunk_tokens: chunk,
                            hidden_size: 64,
                            ..EngineConfig::default()
                        };
                        cfg.scheduler.max_batch_tokens = 4;
                        for reqs in &workloads {
                            sweep.instances += 1;
                            let engine = hybrid_serve_sim::engine::run(reqs, &profile, &cfg);
                            let oracle = Oracle::new(&profile, &cfg).run(reqs, 1000);
                            match (engine, oracle) {
                                (Ok(e), Ok(o)) => {
                                    if o.iterations() <= 5 {
                                        sweep.short += 1;
                                    }
                                    if e.events != o.log {
                                        if sweep.mismatches.len() < 5 {
                                            sweep.mismatches.push(format!(
                                                "{strategy:?} layers={layers} slow={slowdown} mem=({gpu_tokens},{cpu_tokens}) chunk={chunk:?} reqs={reqs:?}\n{}",
                                                first_difference(&e.events, &o.log)
                                            ));
                                        } else {
                                            sweep.mismatches.push(String::new());
                                        }
                                        continue;
                                    }
                                    if o.log.iter().any(|e| e.kind == EventKind::Sync) {
                                        sweep.with_sync += 1;
                                    }
                                    if o.log.iter().any(|e| e.kind == EventKind::Reject) {
                                        sweep.with_reject += 1;
                                    }
                                    for e in &o.log {
                                        if let Detail::Iteration(it) = &e.detail {
                                            sweep.by_kind[kind_slot(it.strategy)] += 1;
                                        }
                                    }
                                }
                                (Err(_), Err(_)) => sweep.errors_agreed += 1,
                                (e, o) => sweep.mismatches.push(format!(
                                    "{strategy:?} reqs={reqs:?}: engine ok={} oracle ok={}",
                                    e.is_ok(),
                                    o.is_ok()
                                )),
                            }
                        }
                    }
                }
            }
        }
    }
    sweep
}
