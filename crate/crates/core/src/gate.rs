//! Batch-aware gates.
//!
//! A gate buffers feeds between two stages and tracks the lifecycle of every
//! batch passing through it: a batch is created by its first feed, opened
//! (possibly gated by a credit link) when the gate may start emitting it, and
//! closed once the number of emitted feeds reaches the batch's effective
//! arity. Only the innermost metadata frame is consulted.
//!
//! All operations go through a single operation queue. Pending operations are
//! served first-come first-served, except that an operation which cannot make
//! progress (a dequeue with nothing to emit, an enqueue facing a full buffer)
//! does not hold back later operations that can. In particular an enqueue is
//! served ahead of earlier dequeues whenever no open batch has buffered feeds.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rustc_hash::{FxHashMap as HashMap, FxHashSet as HashSet};

use crate::credit::{CreditLink, CreditListener, CreditSink};
use crate::error::{GateError, MetadataError};
use crate::model::{
    aggregate_arity, AggregateFeed, ArityTransform, Delivery, Feed, FeedMetadata, Payload,
};
use crate::trace::{Event, EventKind, Tracer};

/// Monotone id source shared by an ingress gate and partition gates.
#[derive(Clone, Debug)]
pub struct IdSource(Arc<AtomicU64>);

impl Default for IdSource {
    fn default() -> Self {
        Self::starting_at(1)
    }
}

impl IdSource {
    pub fn starting_at(first: u64) -> Self {
        Self(Arc::new(AtomicU64::new(first)))
    }

    pub fn next(&self) -> u64 {
        self.0.fetch_add(1, Ordering::SeqCst)
    }

    pub fn peek(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DequeueMode {
    Plain,
    Aggregate(u64),
    /// Aggregate of `size` feeds re-labelled as a partition for a downstream
    /// local pipeline whose feed-count function is `downstream`.
    Partition {
        size: u64,
        downstream: ArityTransform,
    },
}

impl DequeueMode {
    fn group_size(&self) -> Option<u64> {
        match self {
            DequeueMode::Plain => None,
            DequeueMode::Aggregate(s) => Some(*s),
            DequeueMode::Partition { size, .. } => Some(*size),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum GateScope {
    Global,
    Local(String),
}

impl fmt::Display for GateScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateScope::Global => f.write_str("global pipeline"),
            GateScope::Local(p) => write!(f, "local pipeline `{p}`"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateConfig {
    pub name: String,
    pub mode: DequeueMode,
    /// Bound on buffered feeds across all batches; plain gates only.
    pub capacity: Option<usize>,
    /// Strip the partition frame of arriving feeds and account them against
    /// the original batch.
    pub reassemble: bool,
    pub scope: GateScope,
}

impl GateConfig {
    pub fn plain(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            mode: DequeueMode::Plain,
            capacity: None,
            reassemble: false,
            scope: GateScope::Global,
        }
    }

    pub fn aggregate(name: impl Into<String>, size: u64) -> Self {
        Self {
            mode: DequeueMode::Aggregate(size),
            ..Self::plain(name)
        }
    }

    pub fn partition(name: impl Into<String>, size: u64, downstream: ArityTransform) -> Self {
        Self {
            mode: DequeueMode::Partition { size, downstream },
            ..Self::plain(name)
        }
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = Some(capacity);
        self
    }

    pub fn reassembling(mut self) -> Self {
        self.reassemble = true;
        self
    }

    pub fn in_local(mut self, pipeline: impl Into<String>) -> Self {
        self.scope = GateScope::Local(pipeline.into());
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(size) = self.mode.group_size() {
            if size == 0 {
                return Err(format!("gate `{}`: aggregate size must be at least 1", self.name));
            }
            if self.capacity.is_some() {
                return Err(format!(
                    "gate `{}`: only gates with plain dequeue may bound their buffer",
                    self.name
                ));
            }
        }
        if self.capacity == Some(0) {
            return Err(format!("gate `{}`: capacity must be at least 1", self.name));
        }
        Ok(())
    }
}

/// Gate operations as seen by stage runners, local or remote.
pub trait GateOps: Send + Sync {
    fn name(&self) -> &str;

    /// Blocks while the buffer is full.
    fn enqueue(&self, feed: Feed) -> Result<(), GateError>;

    fn enqueue_all(&self, feeds: Vec<Feed>) -> Result<(), GateError> {
        feeds.into_iter().try_for_each(|f| self.enqueue(f))
    }

    /// Dequeue according to the gate's mode; blocks until something can be
    /// emitted. `Closed` once the gate is shut down and drained.
    fn take(&self) -> Result<Delivery, GateError>;

    fn shutdown(&self);
}

/// Result of aborting a batch at a gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbortStatus {
    /// Batch was never seen here.
    Unknown,
    /// Batch was buffered but not yet opened.
    Pending,
    /// Batch was open; its buffered feeds were dropped.
    Opened,
    /// Batch had already closed here.
    Closed,
}

pub type Ticket = u64;

#[derive(Debug)]
enum PendingOp {
    Enqueue { ticket: Ticket, feed: Feed },
    Dequeue { ticket: Ticket },
}

#[derive(Debug)]
enum Outcome {
    Enqueued,
    Delivered(Delivery),
    Failed(GateError),
}

enum Admission {
    Accept,
    Drop,
}

/// Batch id, partition id and arity an Enqueue event is traced under.
type EnqueueKey = (u64, Option<u64>, u64);

#[derive(Debug)]
struct BatchState {
    /// Metadata shared by all feeds of the batch (sequence ignored).
    template: FeedMetadata,
    arity: u64,
    effective: u64,
    received: u64,
    buffered: VecDeque<Feed>,
    delivered: u64,
    opened: bool,
    open_order: u64,
    failed: Option<String>,
    /// Partition gates: arity of the original batch after the downstream
    /// pipeline, stamped on every partition.
    egress_arity: Option<u64>,
    /// Reassembling gates: arrival sequence replaces partition-local
    /// sequence numbers unless one partition spans the batch.
    renumber: bool,
}

impl BatchState {
    fn ready(&self, mode: &DequeueMode) -> bool {
        match mode.group_size() {
            None => !self.buffered.is_empty(),
            Some(size) => {
                let n = self.buffered.len() as u64;
                n > 0 && (n >= size || self.received == self.arity)
            }
        }
    }
}

#[derive(Default)]
struct State {
    signature: Option<Vec<String>>,
    batches: HashMap<u64, BatchState>,
    unopened: VecDeque<u64>,
    open: BTreeMap<u64, u64>,
    next_open_order: u64,
    buffered_total: usize,
    finished: HashSet<u64>,
    aborted: HashSet<u64>,
    pending: VecDeque<PendingOp>,
    outcomes: HashMap<Ticket, Outcome>,
    next_ticket: Ticket,
    shut_down: bool,
    sources: Vec<Arc<CreditLink>>,
    sinks: Vec<Arc<dyn CreditSink>>,
}

type Releases = Vec<(Arc<dyn CreditSink>, u64)>;

pub struct Gate {
    config: GateConfig,
    tracer: Tracer,
    ids: Option<IdSource>,
    state: Mutex<State>,
    changed: Condvar,
}

impl fmt::Debug for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gate")
            .field("name", &self.config.name)
            .field("mode", &self.config.mode)
            .finish_non_exhaustive()
    }
}

impl Gate {
    /// Partition gates need `ids` to label partitions.
    pub fn new(
        config: GateConfig,
        tracer: Tracer,
        ids: Option<IdSource>,
    ) -> Result<Arc<Self>, String> {
        config.validate()?;
        if matches!(config.mode, DequeueMode::Partition { .. }) && ids.is_none() {
            return Err(format!("partition gate `{}` needs an id source", config.name));
        }
        Ok(Arc::new(Self {
            config,
            tracer,
            ids,
            state: Mutex::new(State::default()),
            changed: Condvar::new(),
        }))
    }

    /// Plain gate with no tracing, mostly for tests and examples.
    pub fn standalone(config: GateConfig) -> Arc<Self> {
        Self::new(config, Tracer::disabled(), Some(IdSource::default()))
            .expect("invalid gate config")
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn config(&self) -> &GateConfig {
        &self.config
    }

    pub fn scope(&self) -> &GateScope {
        &self.config.scope
    }

    /// Bound this gate's batch openings by `link`.
    pub fn add_credit_source(self: &Arc<Self>, link: Arc<CreditLink>) {
        let listener: Arc<dyn CreditListener> = self.clone();
        link.set_listener(Arc::downgrade(&listener));
        self.state.lock().unwrap().sources.push(link);
    }

    /// Return a credit to `sink` for every batch this gate closes.
    pub fn add_credit_sink(&self, sink: Arc<dyn CreditSink>) {
        self.state.lock().unwrap().sinks.push(sink);
    }

    /// Queues an enqueue; completes immediately if it can.
    pub fn submit_enqueue(&self, feed: Feed) -> Ticket {
        self.submit(|ticket| PendingOp::Enqueue { ticket, feed })
    }

    /// Queues a dequeue in arrival order with all other waiting dequeues.
    pub fn submit_dequeue(&self) -> Ticket {
        self.submit(|ticket| PendingOp::Dequeue { ticket })
    }

    pub fn wait_enqueue(&self, ticket: Ticket) -> Result<(), GateError> {
        match self.wait(ticket) {
            Outcome::Enqueued => Ok(()),
            Outcome::Failed(e) => Err(e),
            Outcome::Delivered(_) => unreachable!("enqueue ticket delivered a feed"),
        }
    }

    pub fn wait_dequeue(&self, ticket: Ticket) -> Result<Delivery, GateError> {
        match self.wait(ticket) {
            Outcome::Delivered(d) => Ok(d),
            Outcome::Failed(e) => Err(e),
            Outcome::Enqueued => unreachable!("dequeue ticket completed as enqueue"),
        }
    }

    /// Like [`Gate::wait_dequeue`] but gives up after `timeout`, leaving
    /// the ticket queued.
    pub fn wait_dequeue_timeout(
        &self,
        ticket: Ticket,
        timeout: Duration,
    ) -> Option<Result<Delivery, GateError>> {
        let mut st = self.state.lock().unwrap();
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(outcome) = st.outcomes.remove(&ticket) {
                return Some(match outcome {
                    Outcome::Delivered(d) => Ok(d),
                    Outcome::Failed(e) => Err(e),
                    Outcome::Enqueued => unreachable!("dequeue ticket completed as enqueue"),
                });
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return None;
            }
            st = self.changed.wait_timeout(st, left).unwrap().0;
        }
    }

    /// Withdraws a queued dequeue. Returns what it was served if it
    /// completed before the withdrawal.
    pub fn cancel_dequeue(&self, ticket: Ticket) -> Option<Result<Delivery, GateError>> {
        let mut st = self.state.lock().unwrap();
        st.pending
            .retain(|op| !matches!(op, PendingOp::Dequeue { ticket: t } if *t == ticket));
        st.outcomes.remove(&ticket).map(|outcome| match outcome {
            Outcome::Delivered(d) => Ok(d),
            Outcome::Failed(e) => Err(e),
            Outcome::Enqueued => unreachable!("dequeue ticket completed as enqueue"),
        })
    }

    pub fn enqueue(&self, feed: Feed) -> Result<(), GateError> {
        let mut st = self.state.lock().unwrap();
        // No enqueue queued ahead and nothing to wait for: serve in place.
        if !st.pending.iter().any(|op| matches!(op, PendingOp::Enqueue { .. })) {
            let space = self.config.capacity.map_or(true, |c| st.buffered_total < c);
            if space || !matches!(self.admit(&st, &feed), Ok(Admission::Accept)) {
                let result = self.insert(&mut st, feed);
                self.serve_and_finish(st);
                return result;
            }
        }
        drop(st);
        let t = self.submit_enqueue(feed);
        self.wait_enqueue(t)
    }

    /// Enqueues `feeds` in order under one lock while the buffer has room,
    /// tracing each run of one batch's feeds as a single Enqueue event.
    /// Stops at the first error; later feeds are not enqueued.
    pub fn enqueue_all(&self, feeds: Vec<Feed>) -> Result<(), GateError> {
        let mut st = self.state.lock().unwrap();
        let mut feeds = feeds.into_iter();
        let mut run: Option<(EnqueueKey, u64)> = None;
        let mut result = Ok(());
        for feed in feeds.by_ref() {
            let queued = st.pending.iter().any(|op| matches!(op, PendingOp::Enqueue { .. }));
            let space = self.config.capacity.map_or(true, |c| st.buffered_total < c);
            if queued || !(space || !matches!(self.admit(&st, &feed), Ok(Admission::Accept))) {
                // Flush the run and let the blocking path take the rest.
                if let Some((key, n)) = run.take() {
                    self.record_enqueues(key, n);
                }
                self.serve_and_finish(st);
                return std::iter::once(feed).chain(feeds).try_for_each(|f| self.enqueue(f));
            }
            match self.insert_untraced(&mut st, feed) {
                Ok(Some(key)) => match &mut run {
                    Some((k, n)) if *k == key => *n += 1,
                    _ => {
                        if let Some((k, n)) = run.replace((key, 1)) {
                            self.record_enqueues(k, n);
                        }
                    }
                },
                Ok(None) => {}
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        if let Some((key, n)) = run {
            self.record_enqueues(key, n);
        }
        self.serve_and_finish(st);
        result
    }

    /// Serves whatever the last change unblocked and wakes its waiters.
    fn serve_and_finish(&self, mut st: MutexGuard<'_, State>) {
        let before = st.outcomes.len();
        let releases = self.serve(&mut st);
        let notify = st.outcomes.len() > before;
        self.finish(st, releases, notify);
    }

    /// Alias of [`Gate::enqueue`] for gates configured to reassemble.
    pub fn reassembly_enqueue(&self, feed: Feed) -> Result<(), GateError> {
        if !self.config.reassemble {
            return Err(self.mode_mismatch("reassembly enqueue"));
        }
        self.enqueue(feed)
    }

    pub fn dequeue(&self) -> Result<Feed, GateError> {
        if self.config.mode != DequeueMode::Plain {
            return Err(self.mode_mismatch("plain dequeue"));
        }
        self.take_delivery().map(|d| d.into_feed().expect("plain gate emits feeds"))
    }

    pub fn aggregate_dequeue(&self) -> Result<AggregateFeed, GateError> {
        if !matches!(self.config.mode, DequeueMode::Aggregate(_)) {
            return Err(self.mode_mismatch("aggregate dequeue"));
        }
        self.take_delivery()
            .map(|d| d.into_aggregate().expect("aggregate gate emits aggregates"))
    }

    /// Aggregate dequeue that labels the aggregate as a partition of its
    /// batch.
    pub fn partition_dequeue(&self) -> Result<AggregateFeed, GateError> {
        if !matches!(self.config.mode, DequeueMode::Partition { .. }) {
            return Err(self.mode_mismatch("partition dequeue"));
        }
        self.take_delivery()
            .map(|d| d.into_aggregate().expect("partition gate emits aggregates"))
    }

    fn take_delivery(&self) -> Result<Delivery, GateError> {
        let mut st = self.state.lock().unwrap();
        if !st.pending.iter().any(|op| matches!(op, PendingOp::Dequeue { .. })) {
            self.open_ready_batches(&mut st);
            if let Some(key) = self.candidate(&st) {
                let mut releases = Releases::new();
                let d = self.deliver(&mut st, key, &mut releases);
                let before = st.outcomes.len();
                releases.extend(self.serve(&mut st));
                let notify = st.outcomes.len() > before;
                self.finish(st, releases, notify);
                return Ok(d);
            }
        }
        drop(st);
        let t = self.submit_dequeue();
        self.wait_dequeue(t)
    }

    /// Refuses further enqueues; dequeues drain what can still be emitted
    /// and then fail with `Closed`.
    pub fn shutdown(&self) {
        let mut st = self.state.lock().unwrap();
        st.shut_down = true;
        let releases = self.serve(&mut st);
        self.finish(st, releases, true);
    }

    pub fn is_shut_down(&self) -> bool {
        self.state.lock().unwrap().shut_down
    }

    /// Drops all state of batch `key`; later feeds of it are discarded.
    pub fn abort_batch(&self, key: u64) -> AbortStatus {
        let mut st = self.state.lock().unwrap();
        let status = if let Some(b) = st.batches.remove(&key) {
            st.buffered_total -= b.buffered.len();
            if b.opened {
                st.open.remove(&b.open_order);
                AbortStatus::Opened
            } else {
                st.unopened.retain(|&k| k != key);
                AbortStatus::Pending
            }
        } else if st.finished.contains(&key) {
            AbortStatus::Closed
        } else {
            AbortStatus::Unknown
        };
        if status != AbortStatus::Closed {
            st.aborted.insert(key);
        }
        let releases = self.serve(&mut st);
        self.finish(st, releases, true);
        status
    }

    pub fn buffered(&self) -> usize {
        self.state.lock().unwrap().buffered_total
    }

    pub fn open_batches(&self) -> usize {
        self.state.lock().unwrap().open.len()
    }

    /// Batches currently tracked (open or waiting to open).
    pub fn live_batches(&self) -> usize {
        self.state.lock().unwrap().batches.len()
    }

    pub fn pending_ops(&self) -> usize {
        self.state.lock().unwrap().pending.len()
    }

    pub fn has_closed(&self, key: u64) -> bool {
        self.state.lock().unwrap().finished.contains(&key)
    }

    fn mode_mismatch(&self, op: &'static str) -> GateError {
        GateError::ModeMismatch {
            gate: self.config.name.clone(),
            op,
        }
    }

    fn submit(&self, op: impl FnOnce(Ticket) -> PendingOp) -> Ticket {
        let mut st = self.state.lock().unwrap();
        let ticket = st.next_ticket;
        st.next_ticket += 1;
        st.pending.push_back(op(ticket));
        let releases = self.serve(&mut st);
        let done = st.outcomes.contains_key(&ticket);
        // Our own completion needs no wake-up unless others completed too.
        let others = st.outcomes.len() > usize::from(done) || !releases.is_empty();
        self.finish(st, releases, others);
        ticket
    }

    fn wait(&self, ticket: Ticket) -> Outcome {
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(outcome) = st.outcomes.remove(&ticket) {
                return outcome;
            }
            st = self.changed.wait(st).unwrap();
        }
    }

    fn finish(&self, st: MutexGuard<'_, State>, releases: Releases, notify: bool) {
        drop(st);
        if notify {
            self.changed.notify_all();
        }
        for (sink, key) in releases {
            sink.release(key);
        }
    }

    /// Serves pending operations until none can make progress.
    fn serve(&self, st: &mut State) -> Releases {
        let mut releases = Releases::new();
        loop {
            self.open_ready_batches(st);
            let dequeue_ready = st.shut_down || self.candidate(st).is_some();
            let space = self.config.capacity.map_or(true, |c| st.buffered_total < c);
            let next = st.pending.iter().position(|op| match op {
                PendingOp::Dequeue { .. } => dequeue_ready,
                PendingOp::Enqueue { feed, .. } => {
                    space || !matches!(self.admit(st, feed), Ok(Admission::Accept))
                }
            });
            let Some(idx) = next else { break };
            match st.pending.remove(idx).expect("index in range") {
                PendingOp::Enqueue { ticket, feed } => {
                    let outcome = match self.insert(st, feed) {
                        Ok(()) => Outcome::Enqueued,
                        Err(e) => Outcome::Failed(e),
                    };
                    st.outcomes.insert(ticket, outcome);
                }
                PendingOp::Dequeue { ticket } => {
                    let outcome = match self.candidate(st) {
                        Some(key) => Outcome::Delivered(self.deliver(st, key, &mut releases)),
                        None => Outcome::Failed(GateError::Closed(self.config.name.clone())),
                    };
                    st.outcomes.insert(ticket, outcome);
                }
            }
        }
        releases
    }

    /// Key and post-reassembly metadata of an arriving feed.
    fn route(&self, feed: &Feed) -> Result<(FeedMetadata, Option<u64>), GateError> {
        if self.config.reassemble {
            let (outer, partition) = feed.metadata.pop_partition()?;
            Ok((outer, Some(partition.arity)))
        } else {
            Ok((feed.metadata, None))
        }
    }

    fn admit(&self, st: &State, feed: &Feed) -> Result<Admission, GateError> {
        if st.shut_down {
            return Err(GateError::Closed(self.config.name.clone()));
        }
        let (md, _) = self.route(feed)?;
        if md.depth() == 2 && matches!(self.config.mode, DequeueMode::Partition { .. }) {
            return Err(MetadataError::NestingLimit.into());
        }
        let frame = md.innermost();
        if st.aborted.contains(&frame.id) {
            return Ok(Admission::Drop);
        }
        let duplicate = || GateError::DuplicateFeed {
            gate: self.config.name.clone(),
            batch: frame.id,
            seq: md.feed_seq,
            arity: frame.arity,
        };
        if st.finished.contains(&frame.id) {
            return Err(duplicate());
        }
        if !feed.is_failure() {
            if let Some(sig) = &st.signature {
                if !feed.payload.signature_matches(sig) {
                    return Err(GateError::SignatureError {
                        gate: self.config.name.clone(),
                        expected: sig.clone(),
                        got: feed.payload.signature(),
                    });
                }
            }
        }
        if let Some(b) = st.batches.get(&frame.id) {
            if b.arity != frame.arity {
                return Err(GateError::ArityMismatch {
                    gate: self.config.name.clone(),
                    batch: frame.id,
                    expected: b.arity,
                    got: frame.arity,
                });
            }
            if b.received == b.arity {
                return Err(duplicate());
            }
        }
        Ok(Admission::Accept)
    }

    fn insert(&self, st: &mut State, feed: Feed) -> Result<(), GateError> {
        if let Some(key) = self.insert_untraced(st, feed)? {
            self.record_enqueues(key, 1);
        }
        Ok(())
    }

    fn record_enqueues(&self, (batch, partition, arity): EnqueueKey, count: u64) {
        self.tracer.record(
            Event::new(EventKind::Enqueue, batch)
                .partition(partition)
                .arity(arity)
                .count(count),
        );
    }

    /// Buffers `feed` without tracing it; `None` when the feed was dropped.
    fn insert_untraced(&self, st: &mut State, mut feed: Feed) -> Result<Option<EnqueueKey>, GateError> {
        if let Admission::Drop = self.admit(st, &feed)? {
            return Ok(None);
        }
        let (md, partition_arity) = self.route(&feed)?;
        feed.metadata = md;
        let frame = md.innermost();
        if st.signature.is_none() && !feed.is_failure() {
            st.signature = Some(feed.payload.signature());
        }
        if !st.batches.contains_key(&frame.id) {
            let batch = self.new_batch(md, partition_arity);
            st.batches.insert(frame.id, batch);
            st.unopened.push_back(frame.id);
        }
        let b = st.batches.get_mut(&frame.id).expect("batch just ensured");
        if b.renumber {
            feed.metadata.feed_seq = b.received;
        }
        b.received += 1;
        if let Some(cause) = feed.payload.failure_cause() {
            b.failed.get_or_insert(cause);
        }
        b.buffered.push_back(feed);
        st.buffered_total += 1;
        Ok(Some((md.batch().id, md.partition().map(|p| p.id), frame.arity)))
    }

    fn new_batch(&self, md: FeedMetadata, partition_arity: Option<u64>) -> BatchState {
        let arity = md.innermost().arity;
        let (effective, egress_arity) = match &self.config.mode {
            DequeueMode::Plain => (arity, None),
            DequeueMode::Aggregate(s) => (aggregate_arity(arity, *s), None),
            DequeueMode::Partition { size, downstream } => (
                aggregate_arity(arity, *size),
                Some(downstream.partitioned_total(arity, *size)),
            ),
        };
        BatchState {
            template: md,
            arity,
            effective,
            received: 0,
            buffered: VecDeque::new(),
            delivered: 0,
            opened: false,
            open_order: 0,
            failed: None,
            egress_arity,
            renumber: partition_arity.is_some_and(|p| p != arity),
        }
    }

    fn open_ready_batches(&self, st: &mut State) {
        while let Some(&key) = st.unopened.front() {
            if !st.sources.iter().all(|l| l.credits() > 0) {
                break;
            }
            // Only this gate draws from its sources, so the check above holds.
            for link in &st.sources {
                let granted = link.acquire(key);
                debug_assert!(granted);
            }
            st.unopened.pop_front();
            let order = st.next_open_order;
            st.next_open_order += 1;
            let b = st.batches.get_mut(&key).expect("unopened batch exists");
            b.opened = true;
            b.open_order = order;
            let md = b.template;
            st.open.insert(order, key);
            self.tracer.record(
                Event::new(EventKind::BatchOpen, md.batch().id)
                    .partition(md.partition().map(|p| p.id))
                    .arity(b.effective),
            );
        }
    }

    /// Oldest-opened batch that can emit right now.
    fn candidate(&self, st: &State) -> Option<u64> {
        st.open
            .values()
            .copied()
            .find(|key| st.batches[key].ready(&self.config.mode))
    }

    fn deliver(&self, st: &mut State, key: u64, releases: &mut Releases) -> Delivery {
        let b = st.batches.get_mut(&key).expect("candidate batch exists");
        let take = match self.config.mode.group_size() {
            None => 1,
            Some(size) => size.min(b.buffered.len() as u64) as usize,
        };
        let mut feeds: Vec<Feed> = b.buffered.drain(..take).collect();
        if let Some(cause) = &b.failed {
            for f in &mut feeds {
                f.payload = Payload::failure(cause.clone());
            }
        }
        let index = b.delivered;
        b.delivered += 1;
        let template = b.template;
        let effective = b.effective;
        let egress_arity = b.egress_arity;
        let done = b.delivered == b.effective;
        st.buffered_total -= take;

        let delivery = match &self.config.mode {
            DequeueMode::Plain => Delivery::Feed(feeds.pop().expect("one feed taken")),
            DequeueMode::Aggregate(_) => {
                let mut md = template.with_seq(index);
                md.set_innermost_arity(effective);
                Delivery::Aggregate(AggregateFeed {
                    metadata: md,
                    members: feeds.into_iter().map(|f| f.payload).collect(),
                })
            }
            DequeueMode::Partition { .. } => {
                let pid = self.ids.as_ref().expect("partition gate has ids").next();
                let mut outer = template.with_seq(0);
                outer.set_batch_arity(egress_arity.expect("partition gate batch"));
                let md = outer
                    .push_partition(pid, take as u64)
                    .expect("partition gate holds single-frame batches");
                Delivery::Aggregate(AggregateFeed {
                    metadata: md,
                    members: feeds.into_iter().map(|f| f.payload).collect(),
                })
            }
        };
        let md = delivery.metadata();
        self.tracer.record(
            Event::new(EventKind::Dequeue, template.batch().id)
                .partition(template.partition().map(|p| p.id))
                .arity(effective)
                .count(take as u64),
        );
        if matches!(self.config.mode, DequeueMode::Partition { .. }) {
            log::trace!("gate `{}` emitted partition {md}", self.config.name);
        }
        if done {
            self.close_batch(st, key, releases);
        }
        delivery
    }

    fn close_batch(&self, st: &mut State, key: u64, releases: &mut Releases) {
        let b = st.batches.remove(&key).expect("closing a live batch");
        assert!(
            b.buffered.is_empty(),
            "gate `{}` closing batch {key} with {} buffered feeds",
            self.config.name,
            b.buffered.len()
        );
        st.open.remove(&b.open_order);
        st.finished.insert(key);
        self.tracer.record(
            Event::new(EventKind::BatchClose, b.template.batch().id)
                .partition(b.template.partition().map(|p| p.id))
                .arity(b.effective)
                .count(b.delivered),
        );
        releases.extend(st.sinks.iter().map(|s| (s.clone(), key)));
    }
}

impl CreditListener for Gate {
    fn on_credit(&self) {
        let mut st = self.state.lock().unwrap();
        let releases = self.serve(&mut st);
        self.finish(st, releases, true);
    }
}

impl GateOps for Gate {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn enqueue(&self, feed: Feed) -> Result<(), GateError> {
        Gate::enqueue(self, feed)
    }

    fn enqueue_all(&self, feeds: Vec<Feed>) -> Result<(), GateError> {
        Gate::enqueue_all(self, feeds)
    }

    fn take(&self) -> Result<Delivery, GateError> {
        self.take_delivery()
    }

    fn shutdown(&self) {
        Gate::shutdown(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::credit::{create_link, LinkScope};
    use crate::model::make_metadata;
    use std::thread;
    use std::time::Duration;

    fn feed(batch: u64, arity: u64, seq: u64) -> Feed {
        Feed::new(
            make_metadata(batch, arity).unwrap().with_seq(seq),
            Payload::single("v", seq.to_le_bytes().to_vec()),
        )
    }

    fn seq_of(f: &Feed) -> u64 {
        f.metadata.feed_seq
    }

    #[test]
    fn timed_dequeue_and_cancel() {
        let g = Gate::standalone(GateConfig::plain("g"));
        let t = g.submit_dequeue();
        assert!(g.wait_dequeue_timeout(t, Duration::from_millis(5)).is_none());
        assert_eq!(g.pending_ops(), 1);
        assert!(g.cancel_dequeue(t).is_none());
        assert_eq!(g.pending_ops(), 0);
        g.enqueue(feed(1, 1, 0)).unwrap();
        assert_eq!(g.buffered(), 1, "cancelled dequeue takes nothing");

        let t = g.submit_dequeue();
        let served = g.cancel_dequeue(t).unwrap().unwrap();
        assert_eq!(served.into_feed().unwrap(), feed(1, 1, 0));
        let t = g.submit_dequeue();
        g.enqueue(feed(2, 1, 0)).unwrap();
        let d = g.wait_dequeue_timeout(t, Duration::from_secs(5)).unwrap();
        assert_eq!(d.unwrap().into_feed().unwrap(), feed(2, 1, 0));
    }

    #[test]
    fn first_enqueue_creates_batch_and_appends() {
        let g = Gate::standalone(GateConfig::plain("g"));
        g.enqueue(feed(5, 3, 0)).unwrap();
        assert_eq!(g.live_batches(), 1);
        assert_eq!(g.buffered(), 1);
        g.enqueue(feed(5, 3, 1)).unwrap();
        assert_eq!(g.buffered(), 2);
        assert_eq!(seq_of(&g.dequeue().unwrap()), 0);
        assert_eq!(seq_of(&g.dequeue().unwrap()), 1);
    }

    #[test]
    fn feed_beyond_arity_is_duplicate() {
        let g = Gate::standalone(GateConfig::plain("g"));
        for s in 0..3 {
            g.enqueue(feed(5, 3, s)).unwrap();
        }
        assert!(matches!(g.enqueue(feed(5, 3, 3)), Err(GateError::DuplicateFeed { .. })));
        for _ in 0..3 {
            g.dequeue().unwrap();
        }
        // Closed batches stay closed.
        assert!(matches!(g.enqueue(feed(5, 3, 0)), Err(GateError::DuplicateFeed { .. })));
    }

    #[test]
    fn signature_is_fixed_by_first_feed() {
        let g = Gate::standalone(GateConfig::plain("g"));
        g.enqueue(feed(1, 2, 0)).unwrap();
        let odd = Feed::new(make_metadata(1, 2).unwrap(), Payload::single("w", vec![]));
        assert!(matches!(g.enqueue(odd), Err(GateError::SignatureError { .. })));
    }

    #[test]
    fn arity_disagreement_is_rejected() {
        let g = Gate::standalone(GateConfig::plain("g"));
        g.enqueue(feed(1, 2, 0)).unwrap();
        assert!(matches!(g.enqueue(feed(1, 3, 1)), Err(GateError::ArityMismatch { .. })));
    }

    #[test]
    fn dequeue_prefers_earlier_opened_batch() {
        let g = Gate::standalone(GateConfig::plain("g"));
        g.enqueue(feed(1, 2, 0)).unwrap();
        g.enqueue(feed(2, 2, 0)).unwrap();
        g.enqueue(feed(1, 2, 1)).unwrap();
        let order: Vec<(u64, u64)> = (0..3)
            .map(|_| {
                let f = g.dequeue().unwrap();
                (f.metadata.batch().id, f.metadata.feed_seq)
            })
            .collect();
        assert_eq!(order, vec![(1, 0), (1, 1), (2, 0)]);
    }

    #[test]
    fn singleton_batch_lifecycle() {
        let g = Gate::standalone(GateConfig::plain("g"));
        g.enqueue(feed(9, 1, 0)).unwrap();
        g.dequeue().unwrap();
        assert_eq!(g.live_batches(), 0);
        assert_eq!(g.buffered(), 0);
        assert_eq!(g.open_batches(), 0);
        assert!(g.has_closed(9));
    }

    #[test]
    fn capacity_blocks_enqueue_until_dequeue() {
        let g = Gate::standalone(GateConfig::plain("g").with_capacity(1));
        g.enqueue(feed(1, 2, 0)).unwrap();
        let g2 = g.clone();
        let producer = thread::spawn(move || g2.enqueue(feed(1, 2, 1)));
        thread::sleep(Duration::from_millis(50));
        assert!(!producer.is_finished());
        assert_eq!(g.buffered(), 1);
        assert_eq!(seq_of(&g.dequeue().unwrap()), 0);
        producer.join().unwrap().unwrap();
        assert_eq!(seq_of(&g.dequeue().unwrap()), 1);
    }

    #[test]
    fn enqueue_all_traces_one_event_per_batch_run() {
        let rec = crate::trace::Recorder::in_memory();
        let g = Gate::new(GateConfig::plain("g"), rec.tracer("g"), None).unwrap();
        let feeds = vec![feed(1, 3, 0), feed(1, 3, 1), feed(2, 1, 0), feed(1, 3, 2)];
        g.enqueue_all(feeds).unwrap();
        assert_eq!(g.buffered(), 4);
        let runs: Vec<_> = rec
            .events()
            .iter()
            .filter(|e| e.kind == EventKind::Enqueue)
            .map(|e| (e.batch_id, e.count))
            .collect();
        assert_eq!(runs, vec![(1, 2), (2, 1), (1, 1)]);
        for _ in 0..4 {
            g.dequeue().unwrap();
        }
        assert_eq!(crate::metrics::check_exactly_once(&rec.events()).unwrap(), 2);
    }

    #[test]
    fn enqueue_all_stops_at_first_error() {
        let g = Gate::standalone(GateConfig::plain("g"));
        let feeds = vec![feed(1, 2, 0), feed(1, 3, 1), feed(1, 2, 1)];
        assert!(matches!(g.enqueue_all(feeds), Err(GateError::ArityMismatch { .. })));
        assert_eq!(g.buffered(), 1);
    }

    #[test]
    fn enqueue_all_blocks_on_a_full_buffer() {
        let g = Gate::standalone(GateConfig::plain("g").with_capacity(2));
        let g2 = g.clone();
        let producer = thread::spawn(move || g2.enqueue_all((0..4).map(|s| feed(1, 4, s)).collect()));
        thread::sleep(Duration::from_millis(50));
        assert!(!producer.is_finished());
        assert_eq!(g.buffered(), 2);
        for s in 0..4 {
            assert_eq!(seq_of(&g.dequeue().unwrap()), s);
        }
        producer.join().unwrap().unwrap();
    }

    #[test]
    fn enqueue_overtakes_dequeue_on_empty_gate() {
        let g = Gate::standalone(GateConfig::plain("g"));
        let d = g.submit_dequeue();
        assert_eq!(g.pending_ops(), 1);
        let e = g.submit_enqueue(feed(1, 1, 0));
        g.wait_enqueue(e).unwrap();
        let got = g.wait_dequeue(d).unwrap();
        assert_eq!(got.metadata().batch().id, 1);
        assert_eq!(g.pending_ops(), 0);
    }

    #[test]
    fn common_case_is_fcfs() {
        let g = Gate::standalone(GateConfig::plain("g"));
        g.enqueue(feed(1, 2, 0)).unwrap();
        let d = g.submit_dequeue();
        // Served on submission, before the enqueue below arrives.
        assert_eq!(g.pending_ops(), 0);
        let e = g.submit_enqueue(feed(1, 2, 1));
        assert_eq!(seq_of(&g.wait_dequeue(d).unwrap().into_feed().unwrap()), 0);
        g.wait_enqueue(e).unwrap();
    }

    #[test]
    fn earlier_dequeue_wins() {
        let g = Gate::standalone(GateConfig::plain("g"));
        let first = g.submit_dequeue();
        let second = g.submit_dequeue();
        g.enqueue(feed(1, 2, 0)).unwrap();
        let got = g.wait_dequeue(first).unwrap();
        assert_eq!(got.metadata().feed_seq, 0);
        assert_eq!(g.pending_ops(), 1);
        g.enqueue(feed(1, 2, 1)).unwrap();
        assert_eq!(g.wait_dequeue(second).unwrap().metadata().feed_seq, 1);
    }

    #[test]
    fn unopened_batch_is_not_emitted_until_credit_returns() {
        // up -> down with one credit; batch 2 must wait for batch 1 to close
        // at `down`.
        let up = Gate::standalone(GateConfig::plain("up"));
        let down = Gate::standalone(GateConfig::plain("down"));
        let link = create_link(0, &up, &down, 1, LinkScope::Global, Tracer::disabled()).unwrap();
        up.enqueue(feed(1, 1, 0)).unwrap();
        up.enqueue(feed(2, 1, 0)).unwrap();
        assert_eq!(up.open_batches(), 1);
        assert_eq!(link.credits(), 0);

        let f = up.dequeue().unwrap();
        assert_eq!(f.metadata.batch().id, 1);
        let blocked = up.submit_dequeue();
        assert_eq!(up.pending_ops(), 1);

        down.enqueue(f).unwrap();
        down.dequeue().unwrap();
        // Closing batch 1 at `down` returned the credit and opened batch 2.
        let f2 = up.wait_dequeue(blocked).unwrap();
        assert_eq!(f2.metadata().batch().id, 2);
        assert_eq!(link.credits(), 0);
    }

    #[test]
    fn two_unopened_batches_one_credit_opens_older() {
        let up = Gate::standalone(GateConfig::plain("up"));
        let down = Gate::standalone(GateConfig::plain("down"));
        let _link = create_link(0, &up, &down, 1, LinkScope::Global, Tracer::disabled()).unwrap();
        up.enqueue(feed(7, 1, 0)).unwrap(); // opens with the only credit
        up.enqueue(feed(3, 1, 0)).unwrap();
        up.enqueue(feed(5, 1, 0)).unwrap();
        let order: Vec<u64> = (0..3)
            .map(|_| {
                let f = up.dequeue().unwrap();
                let id = f.metadata.batch().id;
                down.enqueue(f).unwrap();
                down.dequeue().unwrap();
                id
            })
            .collect();
        assert_eq!(order, vec![7, 3, 5]);
    }

    #[test]
    fn aggregate_dequeue_groups_and_rewrites_arity() {
        let g = Gate::standalone(GateConfig::aggregate("agg", 10));
        for s in 0..2236 {
            g.enqueue(feed(1, 2236, s)).unwrap();
        }
        let mut sizes = Vec::new();
        for i in 0..224 {
            let a = g.aggregate_dequeue().unwrap();
            assert_eq!(a.metadata.innermost().arity, 224);
            assert_eq!(a.metadata.feed_seq, i);
            sizes.push(a.members.len());
        }
        assert_eq!(sizes.iter().filter(|&&s| s == 10).count(), 223);
        assert_eq!(sizes[223], 6);
        assert!(g.has_closed(1));
    }

    #[test]
    fn aggregate_barrier_smaller_than_size() {
        let g = Gate::standalone(GateConfig::aggregate("agg", 10));
        for s in 0..3 {
            g.enqueue(feed(4, 4, s)).unwrap();
        }
        let waiting = g.submit_dequeue();
        assert_eq!(g.pending_ops(), 1, "must wait for the 4th feed");
        g.enqueue(feed(4, 4, 3)).unwrap();
        let a = g.wait_dequeue(waiting).unwrap().into_aggregate().unwrap();
        assert_eq!(a.members.len(), 4);
        assert_eq!(a.metadata.innermost().arity, 1);
        assert!(g.has_closed(4));
    }

    #[test]
    fn aggregate_of_one_keeps_arity() {
        let g = Gate::standalone(GateConfig::aggregate("agg", 1));
        for s in 0..3 {
            g.enqueue(feed(1, 3, s)).unwrap();
        }
        for _ in 0..3 {
            let a = g.aggregate_dequeue().unwrap();
            assert_eq!(a.members.len(), 1);
            assert_eq!(a.metadata.innermost().arity, 3);
        }
    }

    #[test]
    fn partition_dequeue_rewrites_outer_arity() {
        let ids = IdSource::starting_at(100);
        let g = Gate::new(
            GateConfig::partition("part", 25, ArityTransform::new(vec![10])),
            Tracer::disabled(),
            Some(ids),
        )
        .unwrap();
        for s in 0..100 {
            g.enqueue(feed(9, 100, s)).unwrap();
        }
        for expected_pid in 100..104 {
            let p = g.partition_dequeue().unwrap();
            assert_eq!(p.metadata.batch().arity, 12);
            assert_eq!(p.metadata.partition().unwrap().id, expected_pid);
            assert_eq!(p.metadata.partition().unwrap().arity, 25);
            assert_eq!(p.members.len(), 25);
        }
        assert!(g.has_closed(9));
    }

    #[test]
    fn reassembly_strips_partition_frame() {
        let g = Gate::standalone(GateConfig::plain("re").reassembling());
        let md = make_metadata(9, 12).unwrap().push_partition(101, 3).unwrap();
        g.enqueue(Feed::new(md, Payload::single("v", vec![1]))).unwrap();
        let f = g.dequeue().unwrap();
        assert_eq!(f.metadata.depth(), 1);
        assert_eq!(f.metadata.batch().arity, 12);
        let flat = Feed::new(make_metadata(9, 12).unwrap(), Payload::single("v", vec![]));
        assert_eq!(
            g.enqueue(flat),
            Err(GateError::Metadata(MetadataError::NoPartitionFrame))
        );
    }

    #[test]
    fn shutdown_drains_then_closes() {
        let g = Gate::standalone(GateConfig::plain("g"));
        g.enqueue(feed(1, 2, 0)).unwrap();
        g.shutdown();
        assert!(g.enqueue(feed(1, 2, 1)).unwrap_err().is_closed());
        assert!(g.dequeue().is_ok());
        assert!(g.dequeue().unwrap_err().is_closed());
    }

    #[test]
    fn shutdown_wakes_blocked_dequeuers() {
        let g = Gate::standalone(GateConfig::plain("g"));
        let g2 = g.clone();
        let waiter = thread::spawn(move || g2.dequeue());
        thread::sleep(Duration::from_millis(20));
        g.shutdown();
        assert!(waiter.join().unwrap().unwrap_err().is_closed());
    }

    #[test]
    fn failed_batch_drains_as_failure_markers() {
        let g = Gate::standalone(GateConfig::plain("g"));
        g.enqueue(feed(1, 3, 0)).unwrap();
        g.enqueue(Feed::new(make_metadata(1, 3).unwrap().with_seq(1), Payload::failure("boom")))
            .unwrap();
        g.enqueue(feed(1, 3, 2)).unwrap();
        for _ in 0..3 {
            assert!(g.dequeue().unwrap().is_failure());
        }
    }

    #[test]
    fn aborted_batch_drops_late_feeds() {
        let g = Gate::standalone(GateConfig::plain("g"));
        g.enqueue(feed(1, 3, 0)).unwrap();
        assert_eq!(g.abort_batch(1), AbortStatus::Opened);
        g.enqueue(feed(1, 3, 1)).unwrap();
        assert_eq!(g.buffered(), 0);
        assert_eq!(g.abort_batch(2), AbortStatus::Unknown);
    }

    #[test]
    fn mode_mismatch_is_reported() {
        let g = Gate::standalone(GateConfig::aggregate("agg", 2));
        assert!(matches!(g.dequeue(), Err(GateError::ModeMismatch { .. })));
        assert!(GateConfig::aggregate("a", 2).with_capacity(4).validate().is_err());
    }
}
