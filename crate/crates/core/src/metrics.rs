//! Offline analysis of run logs: throughput, latency distributions, I/O
//! totals, and the checkers that reconstruct gate state from events.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::trace::{EventKind, TraceEvent};

/// Component name that selects end-to-end request latency.
pub const REQUEST: &str = "request";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("window must be longer than zero")]
    InvalidWindow,
    #[error("no events for component `{0}`")]
    NotFound(String),
}

/// Completed feeds per second in consecutive windows, counted from
/// `RequestComplete` events. Windows start at the first event of the log.
pub fn throughput(events: &[TraceEvent], window_ns: u64) -> Result<Vec<(u64, f64)>, MetricsError> {
    throughput_by(events, window_ns, |e| {
        (e.kind == EventKind::RequestComplete).then_some(e.count)
    })
}

/// Like [`throughput`], counting whatever `items` returns for each event.
pub fn throughput_by(
    events: &[TraceEvent],
    window_ns: u64,
    items: impl Fn(&TraceEvent) -> Option<u64>,
) -> Result<Vec<(u64, f64)>, MetricsError> {
    if window_ns == 0 {
        return Err(MetricsError::InvalidWindow);
    }
    let Some(start) = events.iter().map(|e| e.ts_ns).min() else {
        return Ok(Vec::new());
    };
    let mut bins: BTreeMap<u64, u64> = BTreeMap::new();
    for e in events {
        if let Some(n) = items(e) {
            *bins.entry((e.ts_ns - start) / window_ns).or_default() += n;
        }
    }
    let Some(&last) = bins.keys().next_back() else {
        return Ok(Vec::new());
    };
    let secs = window_ns as f64 / 1e9;
    Ok((0..=last)
        .map(|w| (w * window_ns, bins.get(&w).copied().unwrap_or(0) as f64 / secs))
        .collect())
}

pub fn throughput_csv(series: &[(u64, f64)]) -> String {
    let mut out = String::from("window_start,throughput\n");
    for (start, rate) in series {
        let _ = writeln!(out, "{:.3},{rate:.3}", *start as f64 / 1e9);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub component: String,
    /// Sorted ascending, nanoseconds.
    pub samples: Vec<u64>,
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
}

impl LatencyReport {
    pub fn from_samples(component: impl Into<String>, mut samples: Vec<u64>) -> Self {
        samples.sort_unstable();
        let mean_ns = if samples.is_empty() {
            0.0
        } else {
            samples.iter().map(|&s| s as f64).sum::<f64>() / samples.len() as f64
        };
        Self {
            component: component.into(),
            p50_ns: percentile(&samples, 50.0),
            p99_ns: percentile(&samples, 99.0),
            samples,
            mean_ns,
        }
    }

    pub fn percentile(&self, p: f64) -> u64 {
        percentile(&self.samples, p)
    }

    /// `(latency, fraction of samples strictly greater)` for each distinct
    /// latency.
    pub fn ccdf(&self) -> Vec<(u64, f64)> {
        let n = self.samples.len() as f64;
        let mut out: Vec<(u64, f64)> = Vec::new();
        for (i, &s) in self.samples.iter().enumerate() {
            let above = (self.samples.len() - i - 1) as f64 / n;
            match out.last_mut() {
                Some(last) if last.0 == s => last.1 = above,
                _ => out.push((s, above)),
            }
        }
        out
    }

    /// Coefficient of variation of the samples.
    pub fn spread(&self) -> f64 {
        if self.samples.len() < 2 || self.mean_ns == 0.0 {
            return 0.0;
        }
        let var = self
            .samples
            .iter()
            .map(|&s| (s as f64 - self.mean_ns).powi(2))
            .sum::<f64>()
            / self.samples.len() as f64;
        var.sqrt() / self.mean_ns
    }

    pub fn percentile_csv(&self) -> String {
        let mut out = String::from("percentile,latency\n");
        for p in [0.0, 10.0, 25.0, 50.0, 75.0, 90.0, 95.0, 99.0, 100.0] {
            let _ = writeln!(out, "{p},{:.6}", self.percentile(p) as f64 / 1e9);
        }
        out
    }

    pub fn ccdf_csv(&self) -> String {
        let mut out = String::from("latency,ccdf\n");
        for (l, c) in self.ccdf() {
            let _ = writeln!(out, "{:.6},{c:.6}", l as f64 / 1e9);
        }
        out
    }
}

/// Nearest-rank percentile; 0 for no samples.
fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Latency distribution for `component`:
///
/// * [`REQUEST`]: submit to completion of every request.
/// * a phase name: per partition, first open to last close over the gates
///   of the phase's replicas (components named `<phase>#<r>/...`).
/// * any other component: per batch key, open to close at that gate.
pub fn latency_report(events: &[TraceEvent], component: &str) -> Result<LatencyReport, MetricsError> {
    let samples = if component == REQUEST {
        spans(events, |e| match e.kind {
            EventKind::RequestSubmit => Some(Edge::Start),
            EventKind::RequestComplete => Some(Edge::End),
            _ => None,
        })
    } else {
        let prefix = format!("{component}#");
        let phase = events.iter().any(|e| e.component.starts_with(&prefix));
        spans(events, |e| {
            let ours = if phase {
                e.component.starts_with(&prefix)
            } else {
                &*e.component == component
            };
            match e.kind {
                _ if !ours => None,
                EventKind::BatchOpen => Some(Edge::Start),
                EventKind::BatchClose => Some(Edge::End),
                _ => None,
            }
        })
    };
    if samples.is_empty() {
        return Err(MetricsError::NotFound(component.to_owned()));
    }
    Ok(LatencyReport::from_samples(component, samples))
}

enum Edge {
    Start,
    End,
}

fn spans(events: &[TraceEvent], edge: impl Fn(&TraceEvent) -> Option<Edge>) -> Vec<u64> {
    let mut bounds: HashMap<u64, (Option<u64>, Option<u64>)> = HashMap::new();
    for e in events {
        let Some(edge) = edge(e) else { continue };
        let b = bounds.entry(e.key()).or_default();
        match edge {
            Edge::Start => b.0 = Some(b.0.map_or(e.ts_ns, |t| t.min(e.ts_ns))),
            Edge::End => b.1 = Some(b.1.map_or(e.ts_ns, |t| t.max(e.ts_ns))),
        }
    }
    bounds
        .into_values()
        .filter_map(|(s, e)| Some(e?.saturating_sub(s?)))
        .collect()
}

pub fn io_bytes(events: &[TraceEvent]) -> u64 {
    events
        .iter()
        .filter(|e| e.kind == EventKind::IoBytes)
        .filter_map(|e| e.bytes)
        .sum()
}

/// I/O bytes per emitting component.
pub fn io_by_component(events: &[TraceEvent]) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == EventKind::IoBytes) {
        *out.entry(e.component.to_string()).or_default() += e.bytes.unwrap_or(0);
    }
    out
}

pub fn io_csv(events: &[TraceEvent]) -> String {
    let mut out = String::from("component,bytes\n");
    for (c, b) in io_by_component(events) {
        let _ = writeln!(out, "{c},{b}");
    }
    let _ = writeln!(out, "total,{}", io_bytes(events));
    out
}

/// Events of one component in recording order.
fn of<'a>(events: &'a [TraceEvent], component: &'a str) -> impl Iterator<Item = &'a TraceEvent> {
    events.iter().filter(move |e| &*e.component == component)
}

/// Largest number of feeds buffered at `gate` at any event, reconstructed
/// as enqueues minus dequeued members.
pub fn max_occupancy(events: &[TraceEvent], gate: &str) -> u64 {
    let mut level: i64 = 0;
    let mut peak: i64 = 0;
    for e in of(events, gate) {
        match e.kind {
            EventKind::Enqueue => level += e.count as i64,
            EventKind::Dequeue => level -= e.count as i64,
            _ => continue,
        }
        peak = peak.max(level);
    }
    peak.max(0) as u64
}

/// Largest number of batches opened at `upstream` and not yet closed at
/// `downstream` (the gates at the two ends of a credit link).
pub fn max_open_between(events: &[TraceEvent], upstream: &str, downstream: &str) -> usize {
    let mut edges: Vec<(u64, bool, u64)> = Vec::new();
    for e in events {
        if e.kind == EventKind::BatchOpen && &*e.component == upstream {
            edges.push((e.ts_ns, true, e.key()));
        } else if e.kind == EventKind::BatchClose && &*e.component == downstream {
            edges.push((e.ts_ns, false, e.key()));
        }
    }
    // A close precedes the credit release, which precedes the next open.
    edges.sort_by_key(|&(ts, open, _)| (ts, open));
    let mut open = HashSet::new();
    let mut peak = 0;
    for (_, is_open, key) in edges {
        if is_open {
            open.insert(key);
            peak = peak.max(open.len());
        } else {
            open.remove(&key);
        }
    }
    peak
}

/// Per-gate accounting of one batch key.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchAccount {
    pub enqueued: u64,
    /// Arity carried by the enqueued feeds.
    pub input_arity: Option<u64>,
    pub dequeues: u64,
    pub dequeued_members: u64,
    pub effective_arity: Option<u64>,
    pub closed: bool,
}

impl BatchAccount {
    /// Exactly-once holds when every input feed arrived once, left once, and
    /// the gate emitted exactly its effective arity.
    pub fn balanced(&self) -> bool {
        Some(self.enqueued) == self.input_arity
            && self.dequeued_members == self.enqueued
            && Some(self.dequeues) == self.effective_arity
    }
}

/// Accounts of every batch key at every gate, keyed by (gate, key).
pub fn batch_accounts(events: &[TraceEvent]) -> BTreeMap<(String, u64), BatchAccount> {
    let mut out: BTreeMap<(String, u64), BatchAccount> = BTreeMap::new();
    for e in events {
        let account = || (e.component.to_string(), e.key());
        match e.kind {
            EventKind::Enqueue => {
                let a = out.entry(account()).or_default();
                a.enqueued += e.count;
                a.input_arity = e.arity;
            }
            EventKind::Dequeue => {
                let a = out.entry(account()).or_default();
                a.dequeues += 1;
                a.dequeued_members += e.count;
                a.effective_arity = e.arity;
            }
            EventKind::BatchClose => {
                let a = out.entry(account()).or_default();
                a.closed = true;
                a.effective_arity = e.arity;
            }
            _ => {}
        }
    }
    out
}

/// Exactly-once check over every batch that closed. Returns the number of
/// (gate, batch) pairs checked, or a description of each violation.
pub fn check_exactly_once(events: &[TraceEvent]) -> Result<usize, Vec<String>> {
    let accounts = batch_accounts(events);
    let mut checked = 0;
    let mut bad = Vec::new();
    for ((gate, key), a) in accounts.iter().filter(|(_, a)| a.closed) {
        checked += 1;
        if !a.balanced() {
            bad.push(format!("gate `{gate}` batch {key}: {a:?}"));
        }
    }
    if bad.is_empty() {
        Ok(checked)
    } else {
        Err(bad)
    }
}

/// Names of components that recorded any of `kinds`.
pub fn components(events: &[TraceEvent], kinds: &[EventKind]) -> Vec<String> {
    let mut names: Vec<String> = events
        .iter()
        .filter(|e| kinds.contains(&e.kind))
        .map(|e| e.component.to_string())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    names.sort();
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn ev(ts: u64, kind: EventKind, component: &str, batch: u64) -> TraceEvent {
        TraceEvent {
            ts_ns: ts,
            kind,
            component: Arc::from(component),
            batch_id: batch,
            partition_id: None,
            arity: None,
            count: 1,
            bytes: None,
        }
    }

    #[test]
    fn uniform_completions_give_flat_series() {
        let events: Vec<_> = (0..100)
            .map(|i| {
                let mut e = ev(i * 100_000_000, EventKind::RequestComplete, "service", i);
                e.count = 1;
                e
            })
            .collect();
        let series = throughput(&events, 5_000_000_000).unwrap();
        assert_eq!(series, vec![(0, 10.0), (5_000_000_000, 10.0)]);
        let csv = throughput_csv(&series);
        assert!(csv.starts_with("window_start,throughput\n0.000,10.000\n"));
    }

    #[test]
    fn zero_window_is_rejected() {
        assert_eq!(throughput(&[], 0), Err(MetricsError::InvalidWindow));
        assert_eq!(throughput(&[], 1), Ok(Vec::new()));
    }

    #[test]
    fn open_close_gives_latency() {
        let events = vec![
            ev(100, EventKind::BatchOpen, "g", 1),
            ev(350, EventKind::BatchClose, "g", 1),
        ];
        let r = latency_report(&events, "g").unwrap();
        assert_eq!(r.samples, vec![250]);
        assert_eq!(r.mean_ns, 250.0);
        assert_eq!(
            latency_report(&events, "nope"),
            Err(MetricsError::NotFound("nope".into()))
        );
    }

    #[test]
    fn phase_latency_spans_replica_gates() {
        let mut events = vec![
            ev(10, EventKind::BatchOpen, "sort#0/g0", 1),
            ev(30, EventKind::BatchClose, "sort#0/g0", 1),
            ev(25, EventKind::BatchOpen, "sort#0/g1", 1),
            ev(90, EventKind::BatchClose, "sort#0/g1", 1),
            ev(0, EventKind::BatchOpen, "other#0/g0", 1),
        ];
        for e in &mut events {
            e.partition_id = Some(7);
        }
        let r = latency_report(&events, "sort").unwrap();
        assert_eq!(r.samples, vec![80]);
    }

    #[test]
    fn request_latency_uses_submit_and_complete() {
        let events = vec![
            ev(5, EventKind::RequestSubmit, "service", 1),
            ev(7, EventKind::RequestSubmit, "service", 2),
            ev(20, EventKind::RequestComplete, "service", 2),
            ev(50, EventKind::RequestComplete, "service", 1),
        ];
        let r = latency_report(&events, REQUEST).unwrap();
        assert_eq!(r.samples, vec![13, 45]);
        assert_eq!(r.ccdf(), vec![(13, 0.5), (45, 0.0)]);
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        let r = LatencyReport::from_samples("x", (1..=100).collect());
        assert_eq!(r.p50_ns, 50);
        assert_eq!(r.p99_ns, 99);
        assert_eq!(r.percentile(100.0), 100);
        assert_eq!(r.percentile(0.0), 1);
        assert!(r.percentile_csv().starts_with("percentile,latency\n"));
    }

    #[test]
    fn io_bytes_accumulate() {
        let mut events = Vec::new();
        for (c, b) in [("read", 10), ("write", 5), ("read", 7)] {
            let mut e = ev(0, EventKind::IoBytes, c, 0);
            e.bytes = Some(b);
            events.push(e);
        }
        assert_eq!(io_bytes(&events), 22);
        assert_eq!(io_by_component(&events)["read"], 17);
        assert!(io_csv(&events).ends_with("total,22\n"));
    }

    #[test]
    fn occupancy_counts_members() {
        let mut events = Vec::new();
        for _ in 0..5 {
            events.push(ev(0, EventKind::Enqueue, "g", 1));
        }
        let mut d = ev(1, EventKind::Dequeue, "g", 1);
        d.count = 3;
        events.push(d);
        events.push(ev(2, EventKind::Enqueue, "g", 1));
        assert_eq!(max_occupancy(&events, "g"), 5);
        let mut run = ev(3, EventKind::Enqueue, "g", 1);
        run.count = 4;
        events.push(run);
        assert_eq!(max_occupancy(&events, "g"), 7);
    }

    #[test]
    fn close_before_open_at_same_instant() {
        let events = vec![
            ev(1, EventKind::BatchOpen, "up", 1),
            ev(5, EventKind::BatchOpen, "up", 2),
            ev(5, EventKind::BatchClose, "down", 1),
            ev(9, EventKind::BatchClose, "down", 2),
        ];
        assert_eq!(max_open_between(&events, "up", "down"), 1);
    }

    #[test]
    fn exactly_once_flags_duplicates() {
        let mut events = Vec::new();
        for _ in 0..3 {
            let mut e = ev(0, EventKind::Enqueue, "g", 1);
            e.arity = Some(3);
            events.push(e);
        }
        for _ in 0..3 {
            let mut e = ev(1, EventKind::Dequeue, "g", 1);
            e.arity = Some(3);
            e.count = 1;
            events.push(e);
        }
        let mut close = ev(2, EventKind::BatchClose, "g", 1);
        close.arity = Some(3);
        events.push(close);
        assert_eq!(check_exactly_once(&events), Ok(1));
        let mut extra = ev(3, EventKind::Enqueue, "g", 1);
        extra.arity = Some(3);
        events.push(extra);
        assert_eq!(check_exactly_once(&events).unwrap_err().len(), 1);
    }

    proptest! {
        #[test]
        fn order_statistics_are_monotone(samples in proptest::collection::vec(0u64..1_000_000, 1..200)) {
            let r = LatencyReport::from_samples("x", samples);
            let min = r.samples[0];
            prop_assert!(r.p99_ns >= r.p50_ns);
            prop_assert!(r.p50_ns >= min);
            let ccdf = r.ccdf();
            prop_assert!(ccdf.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 >= w[1].1));
            prop_assert_eq!(ccdf.last().unwrap().1, 0.0);
        }

        #[test]
        fn throughput_conserves_items(ts in proptest::collection::vec(0u64..10_000_000_000, 1..300), window in 1u64..3_000_000_000) {
            let events: Vec<_> = ts.iter().map(|&t| {
                let mut e = ev(t, EventKind::RequestComplete, "service", 0);
                e.count = 2;
                e
            }).collect();
            let series = throughput(&events, window).unwrap();
            let total: f64 = series.iter().map(|(_, r)| r * window as f64 / 1e9).sum();
            prop_assert!((total - 2.0 * ts.len() as f64).abs() < 1e-6 * ts.len() as f64);
        }
    }
}
