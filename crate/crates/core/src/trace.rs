//! Allocation traces: parsing, validation, statistics and synthesis.
//!
//! A trace is line-oriented text, one event per line:
//!
//! ```text
//! malloc <time> <size> <addr>
//! free <time> <addr>
//! ```
//!
//! `time` is decimal seconds, `size` decimal bytes and `addr` either a
//! `0x`-prefixed hexadecimal or a decimal integer. Serialization always emits
//! lowercase `0x` hex addresses.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("line {line}: malformed trace line: {reason}")]
    MalformedLine { line: usize, reason: String },
}

/// Non-fatal findings while validating a trace. The offending event is
/// dropped (or normalized) and parsing continues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Diagnostic {
    /// A free whose address has no live prior allocation; dropped.
    DanglingFree { line: usize, address: u64 },
    /// `malloc(0)`; normalized to a 1-byte request.
    ZeroSizeAlloc { line: usize },
    /// An allocation that returned the null address; dropped.
    NullAlloc { line: usize },
    /// `free(NULL)`; dropped.
    NullFree { line: usize },
    /// An allocation returned an address that is still live. The earlier
    /// object is never freed.
    AddressReused { line: usize, address: u64 },
    /// Timestamp smaller than its predecessor; kept as is.
    NonMonotoneTime { line: usize },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Diagnostic::DanglingFree { line, address } => {
                write!(f, "line {line}: free of {address:#x} has no live allocation (dropped)")
            }
            Diagnostic::ZeroSizeAlloc { line } => {
                write!(f, "line {line}: zero-byte allocation normalized to 1 byte")
            }
            Diagnostic::NullAlloc { line } => {
                write!(f, "line {line}: allocation returned null (dropped)")
            }
            Diagnostic::NullFree { line } => write!(f, "line {line}: free of null (dropped)"),
            Diagnostic::AddressReused { line, address } => write!(
                f,
                "line {line}: address {address:#x} returned while still live; earlier object leaked"
            ),
            Diagnostic::NonMonotoneTime { line } => {
                write!(f, "line {line}: timestamp decreases")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceEvent {
    Alloc { time: f64, size: u64, address: u64 },
    Free { time: f64, address: u64 },
}

impl TraceEvent {
    pub fn time(&self) -> f64 {
        match *self {
            TraceEvent::Alloc { time, .. } | TraceEvent::Free { time, .. } => time,
        }
    }

    pub fn address(&self) -> u64 {
        match *self {
            TraceEvent::Alloc { address, .. } | TraceEvent::Free { address, .. } => address,
        }
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TraceEvent::Alloc { time, size, address } => {
                write!(f, "malloc {time} {size} {address:#x}")
            }
            TraceEvent::Free { time, address } => write!(f, "free {time} {address:#x}"),
        }
    }
}

/// Address-free form of an event used by the simulator. Objects are numbered
/// by allocation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayOp {
    Alloc { object: usize, size: u64 },
    Free { object: usize },
}

/// A validated, immutable allocation trace.
///
/// Every retained free matches exactly one earlier live allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfilingReport {
    events: Vec<TraceEvent>,
    ops: Vec<ReplayOp>,
    distinct_sizes: Vec<u64>,
    objects: usize,
}

impl ProfilingReport {
    /// Validates `events`, dropping or normalizing the ones that would break
    /// the report invariants. Diagnostic line numbers are 1-based event
    /// positions.
    pub fn from_events(events: impl IntoIterator<Item = TraceEvent>) -> (Self, Vec<Diagnostic>) {
        let mut builder = ReportBuilder::default();
        for (i, event) in events.into_iter().enumerate() {
            builder.push(i + 1, event);
        }
        builder.finish()
    }

    pub fn empty() -> Self {
        Self::from_events(std::iter::empty()).0
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    /// The events with addresses resolved to allocation ordinals.
    pub fn ops(&self) -> &[ReplayOp] {
        &self.ops
    }

    /// Sorted, deduplicated allocation sizes.
    pub fn distinct_sizes(&self) -> &[u64] {
        &self.distinct_sizes
    }

    /// Largest allocation size, 0 for a report without allocations.
    pub fn max_size(&self) -> u64 {
        self.distinct_sizes.last().copied().unwrap_or(0)
    }

    /// Number of allocations.
    pub fn objects(&self) -> usize {
        self.objects
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Canonical trace text: one event per line, hex addresses, `\n` endings.
    pub fn to_trace_string(&self) -> String {
        let mut out = String::with_capacity(self.events.len() * 32);
        for event in &self.events {
            use std::fmt::Write;
            let _ = writeln!(out, "{event}");
        }
        out
    }
}

#[derive(Default)]
struct ReportBuilder {
    events: Vec<TraceEvent>,
    ops: Vec<ReplayOp>,
    live: HashMap<u64, usize>,
    sizes: Vec<u64>,
    diagnostics: Vec<Diagnostic>,
    last_time: f64,
}

impl ReportBuilder {
    fn push(&mut self, line: usize, event: TraceEvent) {
        if event.time() < self.last_time {
            self.diagnostics.push(Diagnostic::NonMonotoneTime { line });
        }
        self.last_time = self.last_time.max(event.time());
        match event {
            TraceEvent::Alloc { time, size, address } => {
                if address == 0 {
                    self.diagnostics.push(Diagnostic::NullAlloc { line });
                    return;
                }
                let size = if size == 0 {
                    self.diagnostics.push(Diagnostic::ZeroSizeAlloc { line });
                    1
                } else {
                    size
                };
                let object = self.sizes.len();
                if self.live.insert(address, object).is_some() {
                    self.diagnostics.push(Diagnostic::AddressReused { line, address });
                }
                self.sizes.push(size);
                self.ops.push(ReplayOp::Alloc { object, size });
                self.events.push(TraceEvent::Alloc { time, size, address });
            }
            TraceEvent::Free { address, .. } => {
                if address == 0 {
                    self.diagnostics.push(Diagnostic::NullFree { line });
                    return;
                }
                match self.live.remove(&address) {
                    Some(object) => {
                        self.ops.push(ReplayOp::Free { object });
                        self.events.push(event);
                    }
                    None => self.diagnostics.push(Diagnostic::DanglingFree { line, address }),
                }
            }
        }
    }

    fn finish(self) -> (ProfilingReport, Vec<Diagnostic>) {
        let objects = self.sizes.len();
        let mut distinct_sizes = self.sizes;
        distinct_sizes.sort_unstable();
        distinct_sizes.dedup();
        let report = ProfilingReport {
            events: self.events,
            ops: self.ops,
            distinct_sizes,
            objects,
        };
        (report, self.diagnostics)
    }
}

/// A parsed report together with the non-fatal diagnostics raised on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrace {
    pub report: ProfilingReport,
    pub diagnostics: Vec<Diagnostic>,
}

/// Parses trace text. Blank lines are ignored; any other line that is not a
/// well-formed `malloc`/`free` record aborts with [`TraceError::MalformedLine`].
pub fn parse_trace(text: &str) -> Result<ParsedTrace, TraceError> {
    let mut builder = ReportBuilder::default();
    for (idx, raw) in text.split('\n').enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let event = parse_line(raw).map_err(|reason| TraceError::MalformedLine { line, reason })?;
        builder.push(line, event);
    }
    let (report, diagnostics) = builder.finish();
    Ok(ParsedTrace { report, diagnostics })
}

/// Like [`parse_trace`] but accepts arbitrary bytes; invalid UTF-8 yields a
/// malformed line rather than a panic.
pub fn parse_trace_bytes(bytes: &[u8]) -> Result<ParsedTrace, TraceError> {
    parse_trace(&String::from_utf8_lossy(bytes))
}

fn parse_line(raw: &str) -> Result<TraceEvent, String> {
    let fields: Vec<&str> = raw.split_whitespace().collect();
    match fields.as_slice() {
        ["malloc", time, size, addr] => Ok(TraceEvent::Alloc {
            time: parse_time(time)?,
            size: size.parse().map_err(|_| format!("bad size {size:?}"))?,
            address: parse_address(addr)?,
        }),
        ["free", time, addr] => Ok(TraceEvent::Free {
            time: parse_time(time)?,
            address: parse_address(addr)?,
        }),
        [kind, ..] if *kind == "malloc" || *kind == "free" => {
            Err(format!("wrong number of fields for {kind}"))
        }
        [kind, ..] => Err(format!("unknown event {kind:?}")),
        [] => Err("empty line".to_string()),
    }
}

fn parse_time(field: &str) -> Result<f64, String> {
    match field.parse::<f64>() {
        Ok(t) if t.is_finite() && t >= 0.0 => Ok(t),
        _ => Err(format!("bad timestamp {field:?}")),
    }
}

fn parse_address(field: &str) -> Result<u64, String> {
    let parsed = match field.strip_prefix("0x").or_else(|| field.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => field.parse(),
    };
    parsed.map_err(|_| format!("bad address {field:?}"))
}

/// Workload summary in the layout of a benchmark statistics table.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TraceStats {
    pub objects: u64,
    pub total_memory: u64,
    pub max_in_use: u64,
    pub average_size: f64,
    pub memory_ops: u64,
}

pub fn compute_stats(report: &ProfilingReport) -> TraceStats {
    let mut sizes = Vec::with_capacity(report.objects());
    let (mut total, mut in_use, mut peak) = (0u64, 0u64, 0u64);
    for op in report.ops() {
        match *op {
            ReplayOp::Alloc { size, .. } => {
                sizes.push(size);
                total += size;
                in_use += size;
                peak = peak.max(in_use);
            }
            ReplayOp::Free { object } => in_use -= sizes[object],
        }
    }
    let objects = sizes.len() as u64;
    TraceStats {
        objects,
        total_memory: total,
        max_in_use: peak,
        average_size: if objects == 0 { 0.0 } else { total as f64 / objects as f64 },
        memory_ops: report.ops().len() as u64,
    }
}

/// Sorted, deduplicated allocation sizes of `report`.
pub fn distinct_sizes(report: &ProfilingReport) -> Vec<u64> {
    report.distinct_sizes().to_vec()
}

/// Object lifetime, measured in allocations issued after the object's own.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lifetime {
    Fixed(u64),
    Uniform { min: u64, max: u64 },
    Exponential { mean: f64 },
}

impl Lifetime {
    fn sample(&self, rng: &mut impl Rng) -> u64 {
        let raw = match *self {
            Lifetime::Fixed(n) => n,
            Lifetime::Uniform { min, max } => rng.random_range(min..=max.max(min)),
            Lifetime::Exponential { mean } => match Exp::new(1.0 / mean.max(f64::MIN_POSITIVE)) {
                Ok(exp) => exp.sample(rng).ceil() as u64,
                Err(_) => 1,
            },
        };
        raw.max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthProfile {
    /// `(size, weight)` pairs; weights must be positive.
    pub size_weights: Vec<(u64, f64)>,
    pub lifetime: Lifetime,
    /// Total number of events. `ceil(n/2)` allocations are issued and the
    /// remaining events are frees, so an even count drains the heap.
    pub event_count: usize,
    pub seed: u64,
}

/// Generates a synthetic trace. Deterministic for a fixed profile.
///
/// # Panics
///
/// Panics if `size_weights` is empty or contains a non-positive weight while
/// `event_count > 0`.
pub fn synth_trace(profile: &SynthProfile) -> ProfilingReport {
    if profile.event_count == 0 {
        return ProfilingReport::empty();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let picker = WeightedIndex::new(profile.size_weights.iter().map(|&(_, w)| w))
        .expect("size weights must be non-empty and positive");

    let allocs = profile.event_count.div_ceil(2);
    let mut frees_left = profile.event_count - allocs;
    let mut deaths: BinaryHeap<Reverse<(u64, usize)>> = BinaryHeap::new();
    let mut events = Vec::with_capacity(profile.event_count);
    let address_of = |object: usize| 0x1000 + 0x10 * object as u64;
    let clock = |events: &Vec<TraceEvent>| events.len() as f64 / 1_000_000.0;

    for object in 0..allocs {
        while frees_left > 0 {
            match deaths.peek() {
                Some(&Reverse((death, victim))) if death <= object as u64 => {
                    deaths.pop();
                    frees_left -= 1;
                    events.push(TraceEvent::Free { time: clock(&events), address: address_of(victim) });
                }
                _ => break,
            }
        }
        let size = profile.size_weights[picker.sample(&mut rng)].0.max(1);
        let lifetime = profile.lifetime.sample(&mut rng);
        deaths.push(Reverse((object as u64 + lifetime, object)));
        events.push(TraceEvent::Alloc { time: clock(&events), size, address: address_of(object) });
    }
    while frees_left > 0 {
        let Some(Reverse((_, victim))) = deaths.pop() else { break };
        frees_left -= 1;
        events.push(TraceEvent::Free { time: clock(&events), address: address_of(victim) });
    }
    ProfilingReport::from_events(events).0
}
