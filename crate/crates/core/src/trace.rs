//! Event recording.
//!
//! Each gate, stage and credit link records into its own buffer so that
//! recording only contends with activity of the same component. A recorder
//! either keeps everything in memory (tests, short runs) or spills full
//! buffers to a run log file.
//!
//! Run log format: one event per line, tab separated, preceded by a header
//! line starting with `#`:
//!
//! ```text
//! #ts_ns  kind  component  batch_id  partition_id  arity  count  bytes
//! ```
//!
//! Optional columns hold `-` when absent.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub const LOG_HEADER: &str = "#ts_ns\tkind\tcomponent\tbatch_id\tpartition_id\tarity\tcount\tbytes";

const SPILL_THRESHOLD: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Enqueue,
    Dequeue,
    BatchOpen,
    BatchClose,
    CreditAcquire,
    CreditRelease,
    StageStart,
    StageEnd,
    IoBytes,
    RequestSubmit,
    RequestComplete,
}

impl EventKind {
    pub const ALL: [EventKind; 11] = [
        EventKind::Enqueue,
        EventKind::Dequeue,
        EventKind::BatchOpen,
        EventKind::BatchClose,
        EventKind::CreditAcquire,
        EventKind::CreditRelease,
        EventKind::StageStart,
        EventKind::StageEnd,
        EventKind::IoBytes,
        EventKind::RequestSubmit,
        EventKind::RequestComplete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Enqueue => "Enqueue",
            EventKind::Dequeue => "Dequeue",
            EventKind::BatchOpen => "BatchOpen",
            EventKind::BatchClose => "BatchClose",
            EventKind::CreditAcquire => "CreditAcquire",
            EventKind::CreditRelease => "CreditRelease",
            EventKind::StageStart => "StageStart",
            EventKind::StageEnd => "StageEnd",
            EventKind::IoBytes => "IoBytes",
            EventKind::RequestSubmit => "RequestSubmit",
            EventKind::RequestComplete => "RequestComplete",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown event kind `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub ts_ns: u64,
    pub kind: EventKind,
    pub component: Arc<str>,
    pub batch_id: u64,
    pub partition_id: Option<u64>,
    /// Arity that closes the batch for this kind of operation at this
    /// component (input arity for enqueues, effective arity for dequeues).
    pub arity: Option<u64>,
    /// Number of feeds the event covers (aggregate members for dequeues).
    pub count: u64,
    pub bytes: Option<u64>,
}

impl TraceEvent {
    /// Key the emitting gate tracks the batch under.
    pub fn key(&self) -> u64 {
        self.partition_id.unwrap_or(self.batch_id)
    }

    /// Appends this event's log line to `buf`.
    fn append_line(&self, buf: &mut Vec<u8>) {
        let mut num = itoa::Buffer::new();
        let mut field = |buf: &mut Vec<u8>, v: Option<u64>| match v {
            Some(v) => buf.extend_from_slice(num.format(v).as_bytes()),
            None => buf.push(b'-'),
        };
        field(buf, Some(self.ts_ns));
        buf.push(b'\t');
        buf.extend_from_slice(self.kind.as_str().as_bytes());
        buf.push(b'\t');
        buf.extend_from_slice(self.component.as_bytes());
        for v in [Some(self.batch_id), self.partition_id, self.arity, Some(self.count), self.bytes] {
            buf.push(b'\t');
            field(buf, v);
        }
        buf.push(b'\n');
    }

    /// Parses one log line; `intern` supplies the shared component name.
    fn parse_line(line: &str, intern: &mut impl FnMut(&str) -> Arc<str>) -> Result<Self, String> {
        let mut cols = [""; 8];
        let mut n = 0;
        for col in line.split('\t') {
            if n < cols.len() {
                cols[n] = col;
            }
            n += 1;
        }
        if n != cols.len() {
            return Err(format!("expected 8 columns, found {n}"));
        }
        fn num(s: &str, what: &str) -> Result<u64, String> {
            s.parse().map_err(|_| format!("bad {what} `{s}`"))
        }
        fn opt(s: &str, what: &str) -> Result<Option<u64>, String> {
            if s == "-" {
                Ok(None)
            } else {
                num(s, what).map(Some)
            }
        }
        Ok(Self {
            ts_ns: num(cols[0], "timestamp")?,
            kind: cols[1].parse()?,
            component: intern(cols[2]),
            batch_id: num(cols[3], "batch id")?,
            partition_id: opt(cols[4], "partition id")?,
            arity: opt(cols[5], "arity")?,
            count: num(cols[6], "count")?,
            bytes: opt(cols[7], "bytes")?,
        })
    }
}

/// Event under construction; the tracer stamps time and component.
#[derive(Clone, Copy, Debug)]
pub struct Event {
    kind: EventKind,
    batch_id: u64,
    partition_id: Option<u64>,
    arity: Option<u64>,
    count: u64,
    bytes: Option<u64>,
}

impl Event {
    pub fn new(kind: EventKind, batch_id: u64) -> Self {
        Self {
            kind,
            batch_id,
            partition_id: None,
            arity: None,
            count: 1,
            bytes: None,
        }
    }

    pub fn partition(mut self, id: Option<u64>) -> Self {
        self.partition_id = id;
        self
    }

    pub fn arity(mut self, arity: u64) -> Self {
        self.arity = Some(arity);
        self
    }

    pub fn count(mut self, count: u64) -> Self {
        self.count = count;
        self
    }

    pub fn bytes(mut self, bytes: u64) -> Self {
        self.bytes = Some(bytes);
        self
    }
}

/// Monotonic clock anchored to wall-clock time at creation, so logs of
/// different processes on one host line up.
#[derive(Clone, Copy)]
struct Clock {
    start: Instant,
    base_ns: u64,
}

impl Clock {
    fn new() -> Self {
        let base_ns = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64);
        Self {
            start: Instant::now(),
            base_ns,
        }
    }

    fn now_ns(&self) -> u64 {
        self.base_ns + self.start.elapsed().as_nanos() as u64
    }
}

struct Shared {
    epoch: Clock,
    components: Mutex<Vec<Arc<ComponentBuffer>>>,
    sink: Mutex<Option<BufWriter<File>>>,
    spilling: bool,
}

struct ComponentBuffer {
    name: Arc<str>,
    events: Mutex<Vec<TraceEvent>>,
}

/// Collects events from every component of a process.
#[derive(Clone)]
pub struct Recorder {
    shared: Arc<Shared>,
}

impl fmt::Debug for Recorder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Recorder")
            .field("spilling", &self.shared.spilling)
            .finish_non_exhaustive()
    }
}

impl Default for Recorder {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Recorder {
    pub fn in_memory() -> Self {
        Self {
            shared: Arc::new(Shared {
                epoch: Clock::new(),
                components: Mutex::new(Vec::new()),
                sink: Mutex::new(None),
                spilling: false,
            }),
        }
    }

    /// Recorder that spills to `path` as buffers fill; call
    /// [`Recorder::finish`] to flush the remainder.
    pub fn to_file(path: &Path) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{LOG_HEADER}")?;
        Ok(Self {
            shared: Arc::new(Shared {
                epoch: Clock::new(),
                components: Mutex::new(Vec::new()),
                sink: Mutex::new(Some(out)),
                spilling: true,
            }),
        })
    }

    pub fn tracer(&self, component: &str) -> Tracer {
        let buffer = Arc::new(ComponentBuffer {
            name: Arc::from(component),
            events: Mutex::new(Vec::new()),
        });
        self.shared.components.lock().unwrap().push(buffer.clone());
        Tracer {
            inner: Some(TracerInner {
                shared: self.shared.clone(),
                buffer,
            }),
        }
    }

    /// Current timestamp on this recorder's clock (nanoseconds since the Unix
/// epoch, advancing monotonically).
    pub fn now_ns(&self) -> u64 {
        self.shared.epoch.now_ns()
    }

    /// All in-memory events ordered by timestamp (stable within a component).
    pub fn events(&self) -> Vec<TraceEvent> {
        let mut all = Vec::new();
        for c in self.shared.components.lock().unwrap().iter() {
            all.extend(c.events.lock().unwrap().iter().cloned());
        }
        all.sort_by_key(|e| e.ts_ns);
        all
    }

    pub fn write_log(&self, path: &Path) -> io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{LOG_HEADER}")?;
        write_lines(&mut out, &self.events())?;
        out.flush()
    }

    /// Flushes every buffered event to the sink, if one is attached.
    pub fn finish(&self) -> io::Result<()> {
        if !self.shared.spilling {
            return Ok(());
        }
        let components = self.shared.components.lock().unwrap().clone();
        let mut sink = self.shared.sink.lock().unwrap();
        let Some(out) = sink.as_mut() else {
            return Ok(());
        };
        for c in components {
            let drained = std::mem::take(&mut *c.events.lock().unwrap());
            write_lines(out, &drained)?;
        }
        out.flush()
    }
}

struct TracerInner {
    shared: Arc<Shared>,
    buffer: Arc<ComponentBuffer>,
}

/// Recording handle of one component. A disabled tracer drops everything.
#[derive(Default)]
pub struct Tracer {
    inner: Option<TracerInner>,
}

impl Clone for Tracer {
    fn clone(&self) -> Self {
        Self {
            inner: self.inner.as_ref().map(|i| TracerInner {
                shared: i.shared.clone(),
                buffer: i.buffer.clone(),
            }),
        }
    }
}

impl fmt::Debug for Tracer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.inner {
            Some(i) => write!(f, "Tracer({})", i.buffer.name),
            None => f.write_str("Tracer(disabled)"),
        }
    }
}

impl Tracer {
    pub fn disabled() -> Self {
        Self { inner: None }
    }

    pub fn is_enabled(&self) -> bool {
        self.inner.is_some()
    }

    pub fn record(&self, event: Event) {
        let Some(inner) = &self.inner else { return };
        let mut events = inner.buffer.events.lock().unwrap();
        events.push(TraceEvent {
            ts_ns: inner.shared.epoch.now_ns(),
            kind: event.kind,
            component: inner.buffer.name.clone(),
            batch_id: event.batch_id,
            partition_id: event.partition_id,
            arity: event.arity,
            count: event.count,
            bytes: event.bytes,
        });
        if inner.shared.spilling && events.len() >= SPILL_THRESHOLD {
            let drained = std::mem::replace(&mut *events, Vec::with_capacity(SPILL_THRESHOLD));
            drop(events);
            let mut sink = inner.shared.sink.lock().unwrap();
            if let Some(out) = sink.as_mut() {
                if let Err(err) = write_lines(out, &drained) {
                    log::warn!("run log write failed, dropping trace sink: {err}");
                    *sink = None;
                }
            }
        }
    }
}

fn write_lines(out: &mut impl Write, events: &[TraceEvent]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(64 * events.len().min(SPILL_THRESHOLD));
    for chunk in events.chunks(SPILL_THRESHOLD) {
        buf.clear();
        for e in chunk {
            e.append_line(&mut buf);
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a run log, returning events ordered by timestamp.
pub fn read_log(path: &Path) -> io::Result<Vec<TraceEvent>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    let mut names: HashSet<Arc<str>> = HashSet::new();
    let mut intern = |name: &str| -> Arc<str> {
        if let Some(n) = names.get(name) {
            return n.clone();
        }
        let n: Arc<str> = Arc::from(name);
        names.insert(n.clone());
        n
    };
    let mut buf = String::new();
    for no in 0.. {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        let line = buf.trim_end_matches(['\n', '\r']);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let event = TraceEvent::parse_line(line, &mut intern).map_err(|e| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), no + 1),
            )
        })?;
        events.push(event);
    }
    events.sort_by_key(|e| e.ts_ns);
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.log");
        let rec = Recorder::to_file(&path).unwrap();
        let gate = rec.tracer("g0");
        let io = rec.tracer("storage.read");
        for i in 0..5000u64 {
            gate.record(Event::new(EventKind::Enqueue, 1).partition(Some(i)).arity(3));
        }
        io.record(Event::new(EventKind::IoBytes, 1).bytes(512));
        rec.finish().unwrap();

        let events = read_log(&path).unwrap();
        assert_eq!(events.len(), 5001);
        assert!(events.windows(2).all(|w| w[0].ts_ns <= w[1].ts_ns));
        let io_total: u64 = events
            .iter()
            .filter(|e| e.kind == EventKind::IoBytes)
            .filter_map(|e| e.bytes)
            .sum();
        assert_eq!(io_total, 512);
        let first = events.iter().find(|e| e.kind == EventKind::Enqueue).unwrap();
        assert_eq!(first.partition_id, Some(0));
        assert_eq!(first.arity, Some(3));
    }

    #[test]
    fn disabled_tracer_is_silent() {
        Tracer::disabled().record(Event::new(EventKind::Dequeue, 1));
    }

    #[test]
    fn malformed_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.log");
        std::fs::write(&path, format!("{LOG_HEADER}\n1\tEnqueue\tg\t1\t-\t-\t1\n")).unwrap();
        let err = read_log(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }
}
