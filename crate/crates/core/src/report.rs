//! Run metrics computed from the event log, plus log and metrics I/O.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{DomainError, Micros};
use crate::engine::{Detail, Event};
use crate::scheduler::StrategyKind;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("corrupt event log at byte {offset}: {message}")]
    Corrupt { offset: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub throughput_tokens_per_s: f64,
    pub total_output_tokens: u64,
    pub makespan_us: f64,
    pub avg_per_token_latency_us: f64,
    /// Per-token latency of each completed request, in completion order.
    pub per_request_latencies_us: Vec<f64>,
    pub strategy_histogram: BTreeMap<StrategyKind, u64>,
    pub iterations: u64,
    /// Share of busy time spent in iterations without prefill work (`b`).
    pub decode_intensive_fraction: f64,
    /// Median GPU/CPU attention speed ratio over decode iterations (`a`).
    pub gpu_cpu_power_ratio: Option<f64>,
    /// `b / a`.
    pub speedup_estimate: Option<f64>,
    pub arrived_count: u64,
    pub completed_count: u64,
    pub rejected_count: u64,
    pub incomplete_count: u64,
    pub gpu_busy_us: f64,
    pub cpu_busy_us: f64,
    pub bubble_us: f64,
    pub transfer_us: f64,
}

/// Full latency of a request spread over its output tokens.
pub fn per_token_latency(arrival_us: f64, completion_us: f64, output_len: u32) -> Micros {
    assert!(output_len >= 1);
    Micros::new((completion_us - arrival_us) / output_len as f64)
}

/// Upper-bound estimate of the throughput gain from CPU offload: the
/// decode-intensive fraction `b` over the GPU/CPU power ratio `a`.
pub fn speedup_estimate(a: f64, b: f64) -> Result<f64, DomainError> {
    let a = crate::cost_model::ensure_positive("a", a)?;
    if !(0.0..=1.0).contains(&b) {
        return Err(DomainError::NotAFraction { name: "b", value: b });
    }
    Ok(b / a)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Incremental form of [`summarize`], fed one event at a time.
#[derive(Debug, Clone, Default)]
pub struct Summarizer {
    first_arrival: Option<f64>,
    last_output: Option<f64>,
    tokens: u64,
    latencies: Vec<f64>,
    histogram: BTreeMap<StrategyKind, u64>,
    iterations: u64,
    busy: f64,
    decode_only: f64,
    ratios: Vec<f64>,
    arrived: u64,
    completed: u64,
    rejected: u64,
    gpu_busy: f64,
    cpu_busy: f64,
    bubble: f64,
    transfer: f64,
}

impl Summarizer {
    pub fn push(&mut self, event: &Event) {
        match &event.detail {
            Detail::Arrival { .. } => {
                self.arrived += 1;
                let t = self.first_arrival.map_or(event.t_us, |f| f.min(event.t_us));
                self.first_arrival = Some(t);
            }
            Detail::Reject { .. } => self.rejected += 1,
            Detail::Iteration(o) => {
                self.iterations += 1;
                *self.histogram.entry(o.strategy).or_default() += 1;
                let d = o.duration.as_f64();
                self.busy += d;
                if o.decode_only {
                    self.decode_only += d;
                }
                if let Some(r) = o.rate_ratio {
                    self.ratios.push(r);
                }
                self.gpu_busy += o.gpu_busy.as_f64();
                self.cpu_busy += o.cpu_busy.as_f64();
                self.bubble += o.bubble.as_f64();
                self.transfer += o.transfer_time.as_f64();
            }
            Detail::TokenEmit { .. } => {
                self.tokens += 1;
                self.last_output = Some(self.last_output.map_or(event.t_us, |l| l.max(event.t_us)));
            }
            Detail::Complete { arrival_us, output_len } => {
                self.completed += 1;
                self.latencies
                    .push(per_token_latency(*arrival_us, event.t_us, *output_len).as_f64());
            }
            Detail::Admit { .. } | Detail::Decide(_) | Detail::Sync { .. } => {}
        }
    }

    pub fn finish(mut self) -> RunMetrics {
        let makespan = match (self.first_arrival, self.last_output) {
            (Some(a), Some(l)) => l - a,
            _ => 0.0,
        };
        let throughput = if makespan > 0.0 {
            self.tokens as f64 / makespan * 1e6
        } else {
            0.0
        };
        let avg = if self.latencies.is_empty() {
            0.0
        } else {
            self.latencies.iter().sum::<f64>() / self.latencies.len() as f64
        };
        let b = if self.busy > 0.0 { self.decode_only / self.busy } else { 0.0 };
        let a = median(&mut self.ratios);
        RunMetrics {
            throughput_tokens_per_s: throughput,
            total_output_tokens: self.tokens,
            makespan_us: makespan,
            avg_per_token_latency_us: avg,
            per_request_latencies_us: self.latencies,
            strategy_histogram: self.histogram,
            iterations: self.iterations,
            decode_intensive_fraction: b,
            gpu_cpu_power_ratio: a,
            speedup_estimate: a.and_then(|a| speedup_estimate(a, b).ok()),
            arrived_count: self.arrived,
            completed_count: self.completed,
            rejected_count: self.rejected,
            incomplete_count: self.arrived - self.completed - self.rejected,
            gpu_busy_us: self.gpu_busy,
            cpu_busy_us: self.cpu_busy,
            bubble_us: self.bubble,
            transfer_us: self.transfer,
        }
    }
}

/// Aggregates a run's event log into its metrics.
pub fn summarize(events: &[Event]) -> RunMetrics {
    let mut s = Summarizer::default();
    for e in events {
        s.push(e);
    }
    s.finish()
}

pub fn write_events_jsonl(events: &[Event], mut out: impl Write) -> std::io::Result<()> {
    for e in events {
        writeln!(out, "{}", e.to_json_line())?;
    }
    Ok(())
}

/// Parses a JSON-lines event log. Errors carry the byte offset of the bad line.
pub fn parse_events_jsonl(mut reader: impl BufRead) -> Result<Vec<Event>, ReportError> {
    let mut events = Vec::new();
    let mut offset = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        let text = line.trim();
        if !text.is_empty() {
            let event: Event = serde_json::from_str(text).map_err(|e| ReportError::Corrupt {
                offset,
                message: e.to_string(),
            })?;
            events.push(event);
        }
        offset += n as u64;
    }
    Ok(events)
}

pub fn metrics_json(metrics: &RunMetrics) -> String {
    let mut s = serde_json::to_string_pretty(metrics).expect("metrics serialize");
    s.push('\n');
    s
}

pub const CSV_HEADER: &str = "run,throughput_tokens_per_s,total_output_tokens,makespan_us,avg_per_token_latency_us,iterations,gpu_only_iterations,asymmetric_iterations,async_iterations,decode_intensive_fraction,gpu_cpu_power_ratio,speedup_estimate,completed,rejected,incomplete";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row matching [`CSV_HEADER`].
pub fn metrics_csv_row(run: &str, m: &RunMetrics) -> String {
    let h = |k| m.strategy_histogram.get(&k).copied().unwrap_or(0);
    format!(
        "{run},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        m.throughput_tokens_per_s,
        m.total_output_tokens,
        m.makespan_us,
        m.avg_per_token_latency_us,
        m.iterations,
        h(StrategyKind::GpuOnly),
        h(StrategyKind::AsymmetricPipelining),
        h(StrategyKind::AsyncOverlap),
        m.decode_intensive_fraction,
        opt(m.gpu_cpu_power_ratio),
        opt(m.speedup_estimate),
        m.completed_count,
        m.rejected_count,
        m.incomplete_count,
    )
}

pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a RunMetrics)>) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for (run, m) in rows {
        s.push_str(&metrics_csv_row(run, m));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::IterationOutcome;
    use crate::memory::Device;
    use crate::workload::RequestId;

    fn ev(t: f64, id: Option<u64>, detail: Detail) -> Event {
        Event {
            t_us: t,
            kind: detail.kind(),
            strategy: None,
            request_id: id.map(RequestId),
            detail,
        }
    }

    fn iteration(index: u64, strategy: StrategyKind, duration: f64, decode_only: bool, ratio: f64) -> Detail {
        let line = format!(
            r#"{{"index":{index},"strategy":"{}","duration":{duration},"tokens_emitted_gpu":1,"tokens_emitted_cpu":0,"gpu_busy":{duration},"cpu_busy":0.0,"transfer_time":0.0,"bubble":0.0,"decode_only":{decode_only},"rate_ratio":{ratio}}}"#,
            strategy.as_str()
        );
        Detail::Iteration(serde_json::from_str::<IterationOutcome>(&line).unwrap())
    }

    fn three_iterations() -> Vec<Event> {
        let tok = |g| Detail::TokenEmit {
            device: Device::Gpu,
            generated: g,
        };
        vec![
            ev(10.0, Some(0), Detail::Arrival { prompt_len: 4, output_len: 3 }),
            ev(10.0, None, iteration(0, StrategyKind::GpuOnly, 400.0, false, 4.0)),
            ev(410.0, Some(0), tok(1)),
            ev(410.0, None, iteration(1, StrategyKind::GpuOnly, 300.0, true, 10.0)),
            ev(710.0, Some(0), tok(2)),
            ev(710.0, None, iteration(2, StrategyKind::AsyncOverlap, 300.0, true, 12.0)),
            ev(1010.0, Some(0), tok(3)),
            ev(1010.0, Some(0), Detail::Complete { arrival_us: 10.0, output_len: 3 }),
        ]
    }

    #[test]
    fn hand_built_log() {
        let m = summarize(&three_iterations());
        assert_eq!(m.makespan_us, 1000.0);
        assert_eq!(m.total_output_tokens, 3);
        assert!((m.throughput_tokens_per_s - 3000.0).abs() < 1e-9);
        assert!((m.avg_per_token_latency_us - 1000.0 / 3.0).abs() < 1e-9);
        assert_eq!(m.iterations, 3);
        assert_eq!(m.strategy_histogram[&StrategyKind::GpuOnly], 2);
        assert_eq!(m.strategy_histogram[&StrategyKind::AsyncOverlap], 1);
        assert!((m.decode_intensive_fraction - 0.6).abs() < 1e-12);
        assert_eq!(m.gpu_cpu_power_ratio, Some(10.0));
        assert!((m.speedup_estimate.unwrap() - 0.06).abs() < 1e-12);
        assert_eq!(m.incomplete_count, 0);
    }

    #[test]
    fn latency_and_speedup_formulas() {
        assert_eq!(per_token_latency(0.0, 1000.0, 10).as_f64(), 100.0);
        assert_eq!(per_token_latency(5.0, 105.0, 1).as_f64(), 100.0);
        assert!((speedup_estimate(10.0, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(speedup_estimate(3.0, 0.0).unwrap(), 0.0);
        assert!(speedup_estimate(0.0, 0.5).is_err());
        assert!(speedup_estimate(2.0, 1.5).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_corrupt_offset() {
        let events = three_iterations();
        let mut buf = Vec::new();
        write_events_jsonl(&events, &mut buf).unwrap();
        let back = parse_events_jsonl(&buf[..]).unwrap();
        assert_eq!(summarize(&back), summarize(&events));

        let first_len = buf.iter().position(|&b| b == b'\n').unwrap() + 1;
        let mut bad = buf[..first_len].to_vec();
        bad.extend_from_slice(b"{\"t_us\": 1.0, \"kind\": \"token_emit\"\n");
        match parse_events_jsonl(&bad[..]) {
            Err(ReportError::Corrupt { offset, .. }) => assert_eq!(offset, first_len as u64),
            other => panic!("expected corrupt log error, got {other:?}"),
        }
    }

    #[test]
    fn csv_has_header_and_row() {
        let m = summarize(&three_iterations());
        let csv = metrics_csv([("auto", &m)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[1].starts_with("auto,3000"));
    }
}
