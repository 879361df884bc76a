//! Profiling-driven cost model.
//!
//! A [`HardwareProfile`] holds offline-profiled, per-layer latency tables for
//! the GPU linear operators (Q/K/V/O projections and FFN), GPU attention and
//! CPU attention, together with memory capacities and interconnect figures.
//! Lookups interpolate between profiled points and clamp outside the
//! profiled range.
//!
//! All durations are in microseconds.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Sub};
use std::path::Path;

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

/// A non-negative span of simulated time in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Micros(f64);

impl Micros {
    pub const ZERO: Micros = Micros(0.0);

    /// Panics on negative or NaN input; durations never go below zero.
    pub fn new(us: f64) -> Self {
        assert!(us >= 0.0, "duration must be non-negative, got {us}");
        Micros(us)
    }

    pub fn as_f64(self) -> f64 {
        self.0
    }

    pub fn max(self, other: Micros) -> Micros {
        if other.0 > self.0 {
            other
        } else {
            self
        }
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }
}

impl Add for Micros {
    type Output = Micros;
    fn add(self, rhs: Micros) -> Micros {
        Micros(self.0 + rhs.0)
    }
}

impl AddAssign for Micros {
    fn add_assign(&mut self, rhs: Micros) {
        self.0 += rhs.0;
    }
}

/// Saturates at zero.
impl Sub for Micros {
    type Output = Micros;
    fn sub(self, rhs: Micros) -> Micros {
        Micros((self.0 - rhs.0).max(0.0))
    }
}

impl Mul<f64> for Micros {
    type Output = Micros;
    fn mul(self, rhs: f64) -> Micros {
        Micros::new(self.0 * rhs)
    }
}

impl Div<f64> for Micros {
    type Output = Micros;
    fn div(self, rhs: f64) -> Micros {
        Micros::new(self.0 / rhs)
    }
}

impl Sum for Micros {
    fn sum<I: Iterator<Item = Micros>>(iter: I) -> Micros {
        iter.fold(Micros::ZERO, Add::add)
    }
}

impl fmt::Display for Micros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}us", self.0)
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("failed to read profile {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid profile: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid profile: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("{name} must be strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{name} must lie in [0, 1], got {value}")]
    NotAFraction { name: &'static str, value: f64 },
}

pub(crate) fn ensure_positive(name: &'static str, value: f64) -> Result<f64, DomainError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(DomainError::NonPositive { name, value })
    }
}

/// One profiled sample. For linear-op tables `kv_tokens` is absent; for
/// attention tables `token_count` is the batch size (number of sequences) and
/// `kv_tokens` the total cached tokens attended over by the whole batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(into = "RawPoint")]
pub struct ProfilePoint {
    pub token_count: u64,
    pub kv_tokens: Option<u64>,
    pub latency: Micros,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct RawPoint {
    tokens: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    kv_tokens: Option<u64>,
    latency_us: f64,
}

// Validated inside the map visitor so the error position is the point's own line.
impl<'de> Deserialize<'de> for ProfilePoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        const FIELDS: &[&str] = &["tokens", "kv_tokens", "latency_us"];
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = ProfilePoint;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a profile point {tokens, kv_tokens?, latency_us}")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<ProfilePoint, A::Error> {
                let (mut tokens, mut kv, mut latency) = (None, None, None);
                while let Some(key) = map.next_key::<String>()? {
                    match key.as_str() {
                        "tokens" if tokens.is_none() => tokens = Some(map.next_value::<u64>()?),
                        "kv_tokens" if kv.is_none() => kv = Some(map.next_value::<u64>()?),
                        "latency_us" if latency.is_none() => latency = Some(map.next_value::<f64>()?),
                        "tokens" => return Err(de::Error::duplicate_field("tokens")),
                        "kv_tokens" => return Err(de::Error::duplicate_field("kv_tokens")),
                        "latency_us" => return Err(de::Error::duplicate_field("latency_us")),
                        other => return Err(de::Error::unknown_field(other, FIELDS)),
                    }
                }
                let tokens = tokens.ok_or_else(|| de::Error::missing_field("tokens"))?;
                let latency = latency.ok_or_else(|| de::Error::missing_field("latency_us"))?;
                ProfilePoint::new(tokens, kv, latency).map_err(de::Error::custom)
            }
        }
        d.deserialize_map(V)
    }
}

impl From<ProfilePoint> for RawPoint {
    fn from(p: ProfilePoint) -> Self {
        RawPoint {
            tokens: p.token_count,
            kv_tokens: p.kv_tokens,
            latency_us: p.latency.as_f64(),
        }
    }
}

impl ProfilePoint {
    pub fn new(token_count: u64, kv_tokens: Option<u64>, latency_us: f64) -> Result<Self, String> {
        if token_count < 1 {
            return Err("`tokens` must be at least 1".into());
        }
        if !(latency_us > 0.0 && latency_us.is_finite()) {
            return Err(format!("`latency_us` must be positive, got {latency_us}"));
        }
        if let Some(kv) = kv_tokens {
            if kv < token_count {
                return Err(format!(
                    "`kv_tokens` ({kv}) must be at least `tokens` ({token_count})"
                ));
            }
        }
        Ok(ProfilePoint {
            token_count,
            kv_tokens,
            latency: Micros(latency_us),
        })
    }

    pub fn linear(token_count: u64, latency_us: f64) -> Self {
        Self::new(token_count, None, latency_us).expect("valid linear point")
    }

    pub fn attention(batch: u64, kv_tokens: u64, latency_us: f64) -> Self {
        Self::new(batch, Some(kv_tokens), latency_us).expect("valid attention point")
    }
}

/// Per-layer linear-op latency by batched token count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ProfilePoint>", into = "Vec<ProfilePoint>")]
pub struct LinearTable {
    tokens: Vec<f64>,
    latency: Vec<f64>,
}

impl TryFrom<Vec<ProfilePoint>> for LinearTable {
    type Error = String;

    fn try_from(mut points: Vec<ProfilePoint>) -> Result<Self, String> {
        if points.is_empty() {
            return Err("linear table must not be empty".into());
        }
        if points.iter().any(|p| p.kv_tokens.is_some()) {
            return Err("linear table points must not carry `kv_tokens`".into());
        }
        points.sort_by_key(|p| p.token_count);
        for w in points.windows(2) {
            if w[0].token_count == w[1].token_count {
                return Err(format!("duplicate linear point for tokens={}", w[0].token_count));
            }
            if w[1].latency < w[0].latency {
                return Err(format!(
                    "linear latency must be non-decreasing in tokens (tokens={} is faster than tokens={})",
                    w[1].token_count, w[0].token_count
                ));
            }
        }
        Ok(LinearTable {
            tokens: points.iter().map(|p| p.token_count as f64).collect(),
            latency: points.iter().map(|p| p.latency.as_f64()).collect(),
        })
    }
}

impl From<LinearTable> for Vec<ProfilePoint> {
    fn from(t: LinearTable) -> Self {
        t.points()
    }
}

impl LinearTable {
    pub fn points(&self) -> Vec<ProfilePoint> {
        self.tokens
            .iter()
            .zip(&self.latency)
            .map(|(&t, &l)| ProfilePoint::linear(t as u64, l))
            .collect()
    }

    pub fn lookup(&self, token_count: f64) -> Micros {
        Micros(interpolate_1d(&self.tokens, &self.latency, token_count))
    }
}

/// Attention latency over a complete rectangular (batch, kv_tokens) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ProfilePoint>", into = "Vec<ProfilePoint>")]
pub struct AttentionTable {
    batches: Vec<f64>,
    kv: Vec<f64>,
    /// Row-major, `batches.len() x kv.len()`.
    latency: Vec<f64>,
}

impl TryFrom<Vec<ProfilePoint>> for AttentionTable {
    type Error = String;

    fn try_from(points: Vec<ProfilePoint>) -> Result<Self, String> {
        if points.is_empty() {
            return Err("attention table must not be empty".into());
        }
        let mut keyed = Vec::with_capacity(points.len());
        for p in &points {
            let kv = p
                .kv_tokens
                .ok_or_else(|| format!("attention point tokens={} is missing `kv_tokens`", p.token_count))?;
            keyed.push(((p.token_count, kv), p.latency.as_f64()));
        }
        keyed.sort_by_key(|(k, _)| *k);
        for w in keyed.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(format!(
                    "duplicate attention point for tokens={} kv_tokens={}",
                    w[0].0 .0, w[0].0 .1
                ));
            }
        }
        let mut batches: Vec<u64> = keyed.iter().map(|((b, _), _)| *b).collect();
        batches.dedup();
        let mut kv: Vec<u64> = keyed.iter().map(|((_, k), _)| *k).collect();
        kv.sort_unstable();
        kv.dedup();
        if batches.len() * kv.len() != keyed.len() {
            return Err(format!(
                "attention table must form a complete grid: {} batch sizes x {} kv sizes but {} points",
                batches.len(),
                kv.len(),
                keyed.len()
            ));
        }
        // Sorted lexicographically and complete, so row-major order already holds.
        Ok(AttentionTable {
            batches: batches.into_iter().map(|b| b as f64).collect(),
            kv: kv.into_iter().map(|k| k as f64).collect(),
            latency: keyed.into_iter().map(|(_, l)| l).collect(),
        })
    }
}

impl From<AttentionTable> for Vec<ProfilePoint> {
    fn from(t: AttentionTable) -> Self {
        t.points()
    }
}

impl AttentionTable {
    pub fn points(&self) -> Vec<ProfilePoint> {
        let mut out = Vec::with_capacity(self.latency.len());
        for (i, &b) in self.batches.iter().enumerate() {
            for (j, &k) in self.kv.iter().enumerate() {
                out.push(ProfilePoint::attention(
                    b as u64,
                    k as u64,
                    self.latency[i * self.kv.len() + j],
                ));
            }
        }
        out
    }

    pub fn lookup(&self, batch: f64, kv_tokens: f64) -> Micros {
        let (i0, i1, fb) = bracket(&self.batches, batch);
        let (j0, j1, fk) = bracket(&self.kv, kv_tokens);
        let n = self.kv.len();
        let at = |i: usize, j: usize| self.latency[i * n + j];
        let lo = at(i0, j0) + fk * (at(i0, j1) - at(i0, j0));
        let hi = at(i1, j0) + fk * (at(i1, j1) - at(i1, j0));
        Micros(lo + fb * (hi - lo))
    }

    /// Multiplies every latency by `factor`.
    fn scaled(&self, factor: f64) -> Self {
        AttentionTable {
            batches: self.batches.clone(),
            kv: self.kv.clone(),
            latency: self.latency.iter().map(|l| l * factor).collect(),
        }
    }
}

/// Returns `(lower index, upper index, fraction)` of `x` within sorted `xs`,
/// clamped to the endpoints.
fn bracket(xs: &[f64], x: f64) -> (usize, usize, f64) {
    let last = xs.len() - 1;
    if x <= xs[0] {
        return (0, 0, 0.0);
    }
    if x >= xs[last] {
        return (last, last, 0.0);
    }
    let hi = xs.partition_point(|&v| v <= x);
    let lo = hi - 1;
    (lo, hi, (x - xs[lo]) / (xs[hi] - xs[lo]))
}

fn interpolate_1d(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let (lo, hi, f) = bracket(xs, x);
    ys[lo] + f * (ys[hi] - ys[lo])
}

fn positive<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(serde::de::Error::custom(format!("value must be positive, got {v}")))
    }
}

fn non_negative<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(serde::de::Error::custom(format!("value must be non-negative, got {v}")))
    }
}

fn positive_count<'de, D: serde::Deserializer<'de>>(d: D) -> Result<u32, D::Error> {
    let v = u32::deserialize(d)?;
    if v > 0 {
        Ok(v)
    } else {
        Err(serde::de::Error::custom("value must be positive, got 0"))
    }
}

/// Offline-profiled hardware description. Immutable once constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    #[serde(deserialize_with = "positive_count")]
    pub num_layers: u32,
    #[serde(deserialize_with = "positive")]
    pub gpu_mem_bytes: f64,
    #[serde(deserialize_with = "positive")]
    pub cpu_mem_bytes: f64,
    #[serde(rename = "pcie_bandwidth_bytes_per_s", deserialize_with = "positive")]
    pub pcie_bandwidth: f64,
    #[serde(rename = "pcie_latency_us", deserialize_with = "non_negative")]
    pub pcie_latency_us: f64,
    #[serde(deserialize_with = "positive")]
    pub kv_bytes_per_token: f64,
    #[serde(deserialize_with = "positive")]
    pub weights_bytes: f64,
    #[serde(rename = "per_iteration_overhead_us", deserialize_with = "non_negative")]
    pub per_iteration_overhead_us: f64,
    pub linear: LinearTable,
    pub gpu_attn: AttentionTable,
    pub cpu_attn: AttentionTable,
}

impl HardwareProfile {
    pub fn from_json_str(text: &str) -> Result<Self, ProfileError> {
        let profile: HardwareProfile = serde_json::from_str(text)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    fn validate(&self) -> Result<(), ProfileError> {
        if self.weights_bytes >= self.gpu_mem_bytes {
            return Err(ProfileError::Invalid(format!(
                "weights_bytes ({}) must be smaller than gpu_mem_bytes ({})",
                self.weights_bytes, self.gpu_mem_bytes
            )));
        }
        Ok(())
    }

    pub fn overhead(&self) -> Micros {
        Micros(self.per_iteration_overhead_us)
    }

    pub fn pcie_latency(&self) -> Micros {
        Micros(self.pcie_latency_us)
    }

    /// Returns a copy whose CPU attention rate is `scale` times the original
    /// (latencies divided by `scale`).
    pub fn with_cpu_rate_scale(&self, scale: f64) -> Self {
        assert!(scale > 0.0, "cpu rate scale must be positive");
        HardwareProfile {
            cpu_attn: self.cpu_attn.scaled(1.0 / scale),
            ..self.clone()
        }
    }

    pub fn with_gpu_mem_bytes(&self, bytes: f64) -> Self {
        HardwareProfile {
            gpu_mem_bytes: bytes,
            ..self.clone()
        }
    }
}

/// Builder used by tests and examples to assemble profiles in code.
#[derive(Debug, Clone)]
pub struct ProfileBuilder {
    num_layers: u32,
    gpu_mem_bytes: f64,
    cpu_mem_bytes: f64,
    pcie_bandwidth: f64,
    pcie_latency_us: f64,
    kv_bytes_per_token: f64,
    weights_bytes: f64,
    per_iteration_overhead_us: f64,
    linear: Vec<ProfilePoint>,
    gpu_attn: Vec<ProfilePoint>,
    cpu_attn: Vec<ProfilePoint>,
}

impl Default for ProfileBuilder {
    fn default() -> Self {
        ProfileBuilder {
            num_layers: 1,
            gpu_mem_bytes: 16e9,
            cpu_mem_bytes: 256e9,
            pcie_bandwidth: 16.0 * (1u64 << 30) as f64,
            pcie_latency_us: 0.0,
            kv_bytes_per_token: 131_072.0,
            weights_bytes: 8e9,
            per_iteration_overhead_us: 0.0,
            linear: Vec::new(),
            gpu_attn: Vec::new(),
            cpu_attn: Vec::new(),
        }
    }
}

impl ProfileBuilder {
    pub fn num_layers(mut self, n: u32) -> Self {
        self.num_layers = n;
        self
    }
    pub fn gpu_mem_bytes(mut self, b: f64) -> Self {
        self.gpu_mem_bytes = b;
        self
    }
    pub fn cpu_mem_bytes(mut self, b: f64) -> Self {
        self.cpu_mem_bytes = b;
        self
    }
    pub fn weights_bytes(mut self, b: f64) -> Self {
        self.weights_bytes = b;
        self
    }
    pub fn kv_bytes_per_token(mut self, b: f64) -> Self {
        self.kv_bytes_per_token = b;
        self
    }
    pub fn pcie(mut self, bandwidth_bytes_per_s: f64, latency_us: f64) -> Self {
        self.pcie_bandwidth = bandwidth_bytes_per_s;
        self.pcie_latency_us = latency_us;
        self
    }
    pub fn overhead_us(mut self, us: f64) -> Self {
        self.per_iteration_overhead_us = us;
        self
    }
    pub fn linear(mut self, points: impl IntoIterator<Item = (u64, f64)>) -> Self {
        self.linear = points.into_iter().map(|(t, l)| ProfilePoint::linear(t, l)).collect();
        self
    }
    pub fn gpu_attn(mut self, points: impl IntoIterator<Item = (u64, u64, f64)>) -> Self {
        self.gpu_attn = points
            .into_iter()
            .map(|(b, k, l)| ProfilePoint::attention(b, k, l))
            .collect();
        self
    }
    pub fn cpu_attn(mut self, points: impl IntoIterator<Item = (u64, u64, f64)>) -> Self {
        self.cpu_attn = points
            .into_iter()
            .map(|(b, k, l)| ProfilePoint::attention(b, k, l))
            .collect();
        self
    }

    pub fn build(self) -> Result<HardwareProfile, ProfileError> {
        let check = |name: &'static str, v: f64| {
            ensure_positive(name, v).map_err(|e| ProfileError::Invalid(e.to_string()))
        };
        check("gpu_mem_bytes", self.gpu_mem_bytes)?;
        check("cpu_mem_bytes", self.cpu_mem_bytes)?;
        check("pcie_bandwidth_bytes_per_s", self.pcie_bandwidth)?;
        check("kv_bytes_per_token", self.kv_bytes_per_token)?;
        check("weights_bytes", self.weights_bytes)?;
        if self.num_layers == 0 {
            return Err(ProfileError::Invalid("num_layers must be positive".into()));
        }
        if self.pcie_latency_us < 0.0 || self.per_iteration_overhead_us < 0.0 {
            return Err(ProfileError::Invalid("latencies must be non-negative".into()));
        }
        let profile = HardwareProfile {
            num_layers: self.num_layers,
            gpu_mem_bytes: self.gpu_mem_bytes,
            cpu_mem_bytes: self.cpu_mem_bytes,
            pcie_bandwidth: self.pcie_bandwidth,
            pcie_latency_us: self.pcie_latency_us,
            kv_bytes_per_token: self.kv_bytes_per_token,
            weights_bytes: self.weights_bytes,
            per_iteration_overhead_us: self.per_iteration_overhead_us,
            linear: LinearTable::try_from(self.linear).map_err(ProfileError::Invalid)?,
            gpu_attn: AttentionTable::try_from(self.gpu_attn).map_err(ProfileError::Invalid)?,
            cpu_attn: AttentionTable::try_from(self.cpu_attn).map_err(ProfileError::Invalid)?,
        };
        profile.validate()?;
        Ok(profile)
    }
}

/// Per-layer latency of the GPU linear operators for `token_count` batched tokens.
pub fn linear_time(profile: &HardwareProfile, token_count: u64) -> Micros {
    debug_assert!(token_count >= 1);
    profile.linear.lookup(token_count as f64)
}

/// Per-layer GPU attention latency for `batch` sequences attending over
/// `kv_tokens` cached tokens in total.
pub fn gpu_attention_time(profile: &HardwareProfile, batch: u64, kv_tokens: u64) -> Micros {
    debug_assert!(batch >= 1 && kv_tokens >= batch);
    profile.gpu_attn.lookup(batch as f64, kv_tokens as f64)
}

/// CPU counterpart of [`gpu_attention_time`].
pub fn cpu_attention_time(profile: &HardwareProfile, batch: u64, kv_tokens: u64) -> Micros {
    debug_assert!(batch >= 1 && kv_tokens >= batch);
    profile.cpu_attn.lookup(batch as f64, kv_tokens as f64)
}

/// Attention processing rates, in KV tokens per microsecond, at one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionRates {
    pub gpu_per_us: f64,
    pub cpu_per_us: f64,
}

impl AttentionRates {
    /// GPU-to-CPU attention speed ratio.
    pub fn ratio(&self) -> f64 {
        self.gpu_per_us / self.cpu_per_us
    }
}

/// Per-layer rates at which each device processes attention at the
/// `(batch, kv_tokens)` operating point.
pub fn attention_rates(profile: &HardwareProfile, batch: u64, kv_tokens: u64) -> AttentionRates {
    let kv = kv_tokens as f64;
    AttentionRates {
        gpu_per_us: kv / gpu_attention_time(profile, batch, kv_tokens).as_f64(),
        cpu_per_us: kv / cpu_attention_time(profile, batch, kv_tokens).as_f64(),
    }
}

/// Upper bound on the GPU/CPU attention speed ratio below which splitting a
/// decode-only batch into two pipelined sub-batches beats GPU-only execution:
/// `2·T_lin/T_att + 3 + T_att/T_lin`.
pub fn pipelining_threshold(t_glinear: Micros, t_gatt: Micros) -> Result<f64, DomainError> {
    let lin = ensure_positive("t_glinear", t_glinear.as_f64())?;
    let att = ensure_positive("t_gatt", t_gatt.as_f64())?;
    Ok(2.0 * lin / att + 3.0 + att / lin)
}
