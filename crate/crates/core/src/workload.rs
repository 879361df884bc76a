//! Request streams: canonical JSON-lines traces and seeded synthetic workloads.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// One inference job as it enters the system. Output length is known up front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival_us: f64,
    pub prompt_len: u32,
    pub output_len: u32,
}

impl Request {
    pub fn new(id: u64, arrival_us: f64, prompt_len: u32, output_len: u32) -> Self {
        assert!(prompt_len >= 1 && output_len >= 1, "lengths must be at least 1");
        Request {
            id: RequestId(id),
            arrival_us,
            prompt_len,
            output_len,
        }
    }
}

/// Lifecycle phase. Transitions only move forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Queued,
    Prefill,
    Decode,
    Done,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("failed to open trace {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("trace line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("trace line {line}: duplicate request id {id}")]
    DuplicateId { line: usize, id: u64 },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceRecord {
    #[serde(default)]
    id: Option<u64>,
    arrival_time_us: f64,
    prompt_len: u32,
    output_len: u32,
}

/// Result of loading a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLoad {
    pub requests: Vec<Request>,
    /// Pairs of records whose timestamps appeared out of order in the file.
    pub inversions: u64,
}

/// Loads a JSON-lines trace `{arrival_time_us, prompt_len, output_len[, id]}`.
/// Files ending in `.gz` are decompressed. Records without an `id` are
/// numbered by line order.
pub fn load_trace(path: impl AsRef<Path>) -> Result<TraceLoad, TraceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    parse_trace(BufReader::new(reader))
}

pub fn parse_trace(reader: impl BufRead) -> Result<TraceLoad, TraceError> {
    let mut requests = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| TraceError::Line {
            line: lineno,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(trimmed).map_err(|e| TraceError::Line {
            line: lineno,
            message: e.to_string(),
        })?;
        let bad = |message: String| TraceError::Line { line: lineno, message };
        if rec.prompt_len == 0 {
            return Err(bad("prompt_len must be at least 1".into()));
        }
        if rec.output_len == 0 {
            return Err(bad("output_len must be at least 1".into()));
        }
        if !(rec.arrival_time_us.is_finite() && rec.arrival_time_us >= 0.0) {
            return Err(bad(format!("invalid arrival_time_us {}", rec.arrival_time_us)));
        }
        let id = rec.id.unwrap_or(requests.len() as u64);
        if !seen.insert(id) {
            return Err(TraceError::DuplicateId { line: lineno, id });
        }
        requests.push(Request::new(id, rec.arrival_time_us, rec.prompt_len, rec.output_len));
    }
    let inversions = sort_counting_inversions(&mut requests);
    if inversions > 0 {
        log::warn!("trace timestamps out of order: {inversions} inversions, sorted");
    }
    Ok(TraceLoad { requests, inversions })
}

/// Stable merge sort by arrival time, returning the number of inverted pairs.
fn sort_counting_inversions(items: &mut Vec<Request>) -> u64 {
    if items.len() < 2 {
        return 0;
    }
    let right = items.split_off(items.len() / 2);
    let mut left = std::mem::take(items);
    let mut right = right;
    let mut count = sort_counting_inversions(&mut left) + sort_counting_inversions(&mut right);
    let mut l = left.into_iter().peekable();
    let mut r = right.into_iter().peekable();
    let mut left_remaining = l.len() as u64;
    while let (Some(a), Some(b)) = (l.peek(), r.peek()) {
        if b.arrival_us < a.arrival_us {
            count += left_remaining;
            items.push(r.next().unwrap());
        } else {
            left_remaining -= 1;
            items.push(l.next().unwrap());
        }
    }
    items.extend(l);
    items.extend(r);
    count
}

/// Token-length distribution. Samples are rounded and floored at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Constant { value: u32 },
    /// Inclusive on both ends.
    Uniform { lo: u32, hi: u32 },
    /// Parameters of the underlying normal.
    LogNormal { mu: f64, sigma: f64 },
}

impl LengthDist {
    pub fn lognormal_with_mean(mean: f64, sigma: f64) -> Self {
        LengthDist::LogNormal {
            mu: mean.ln() - sigma * sigma / 2.0,
            sigma,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            LengthDist::Constant { value } => value as f64,
            LengthDist::Uniform { lo, hi } => (lo as f64 + hi as f64) / 2.0,
            LengthDist::LogNormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
        }
    }

    /// Same family, shifted or rescaled to the requested mean.
    pub fn with_mean(&self, mean: f64) -> Self {
        match *self {
            LengthDist::Constant { .. } => LengthDist::Constant {
                value: mean.round().max(1.0) as u32,
            },
            LengthDist::Uniform { lo, hi } => {
                let width = hi - lo;
                let lo = (mean - width as f64 / 2.0).round().max(1.0) as u32;
                LengthDist::Uniform { lo, hi: lo + width }
            }
            LengthDist::LogNormal { sigma, .. } => LengthDist::lognormal_with_mean(mean, sigma),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            LengthDist::Constant { value } if value == 0 => Err("constant length must be >= 1".into()),
            LengthDist::Uniform { lo, hi } if lo == 0 || hi < lo => {
                Err(format!("uniform bounds must satisfy 1 <= lo <= hi, got [{lo}, {hi}]"))
            }
            LengthDist::LogNormal { sigma, mu } if !(sigma >= 0.0 && mu.is_finite()) => {
                Err("lognormal needs finite mu and sigma >= 0".into())
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> u32 {
        match *self {
            LengthDist::Constant { value } => value,
            LengthDist::Uniform { lo, hi } => rng.gen_range(lo..=hi),
            LengthDist::LogNormal { mu, sigma } => {
                let x: f64 = LogNormal::new(mu, sigma).expect("validated").sample(rng);
                x.round().clamp(1.0, u32::MAX as f64) as u32
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalProcess {
    /// Exponential inter-arrival times; the first request arrives at t = 0.
    Poisson { rate_per_s: f64 },
    /// Deterministic spacing; zero puts every request at t = 0.
    Fixed { interval_us: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub arrival: ArrivalProcess,
    pub prompt_len: LengthDist,
    pub output_len: LengthDist,
    pub num_requests: usize,
    #[serde(default)]
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        self.prompt_len.validate().map_err(|e| format!("prompt_len: {e}"))?;
        self.output_len.validate().map_err(|e| format!("output_len: {e}"))?;
        match self.arrival {
            ArrivalProcess::Poisson { rate_per_s } if !(rate_per_s > 0.0 && rate_per_s.is_finite()) => {
                Err(format!("poisson rate must be positive, got {rate_per_s}"))
            }
            ArrivalProcess::Fixed { interval_us } if !(interval_us >= 0.0 && interval_us.is_finite()) => {
                Err(format!("fixed interval must be non-negative, got {interval_us}"))
            }
            _ => Ok(()),
        }
    }
}

/// Generates `spec.num_requests` requests in arrival order. Deterministic in `spec.seed`.
///
/// Panics if `spec` is invalid; call [`WorkloadSpec::validate`] first for user input.
pub fn synthesize(spec: &WorkloadSpec) -> Vec<Request> {
    if let Err(e) = spec.validate() {
        panic!("invalid workload spec: {e}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inter = match spec.arrival {
        ArrivalProcess::Poisson { rate_per_s } => Some(Exp::new(rate_per_s / 1e6).expect("positive rate")),
        ArrivalProcess::Fixed { .. } => None,
    };
    let mut t = 0.0;
    (0..spec.num_requests)
        .map(|i| {
            if i > 0 {
                t += match (&inter, &spec.arrival) {
                    (Some(exp), _) => exp.sample(&mut rng),
                    (None, ArrivalProcess::Fixed { interval_us }) => *interval_us,
                    _ => unreachable!(),
                };
            }
            let prompt = spec.prompt_len.sample(&mut rng);
            let output = spec.output_len.sample(&mut rng);
            Request::new(i as u64, t, prompt, output)
        })
        .collect()
}
