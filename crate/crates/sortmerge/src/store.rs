//! Object store on a local directory. Objects are written once and never
//! changed; every read and write is traced as an `IoBytes` event.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use flowgate::trace::{Event, EventKind, Recorder, Tracer};

/// Prefix of intermediate objects (transformed chunks, sorted runs).
pub const TMP: &str = "tmp";
/// Prefix of merged outputs.
pub const OUT: &str = "out";

/// What an object is used for, for I/O accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    Input,
    Intermediate,
    Output,
}

impl Class {
    pub fn of(key: &str) -> Self {
        match key.split('/').next() {
            Some(TMP) => Class::Intermediate,
            Some(OUT) => Class::Output,
            _ => Class::Input,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Class::Input => "input",
            Class::Intermediate => "intermediate",
            Class::Output => "output",
        }
    }
}

/// Component name of I/O events for `class` and direction.
pub fn io_component(class: Class, write: bool) -> String {
    format!("io/{}-{}", class.name(), if write { "write" } else { "read" })
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    tracers: Vec<(String, Tracer)>,
}

// Shared by every store of the process so two stores on one directory
// never hand out the same key.
static NEXT_KEY: AtomicU64 = AtomicU64::new(0);

impl Store {
    pub fn open(root: impl Into<PathBuf>, recorder: Option<&Recorder>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut tracers = Vec::new();
        for class in [Class::Input, Class::Intermediate, Class::Output] {
            for write in [false, true] {
                let name = io_component(class, write);
                let tracer = recorder.map_or_else(Tracer::disabled, |r| r.tracer(&name));
                tracers.push((name, tracer));
            }
        }
        Ok(Self { root, tracers })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, key: &str) -> io::Result<PathBuf> {
        let rel = Path::new(key);
        if key.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("bad object key `{key}`"),
            ));
        }
        Ok(self.root.join(rel))
    }

    fn trace(&self, key: &str, write: bool, bytes: usize) {
        let name = io_component(Class::of(key), write);
        if let Some((_, t)) = self.tracers.iter().find(|(n, _)| *n == name) {
            t.record(Event::new(EventKind::IoBytes, 0).bytes(bytes as u64));
        }
    }

    pub fn read(&self, key: &str) -> io::Result<Vec<u8>> {
        let bytes = fs::read(self.path(key)?)
            .map_err(|e| io::Error::new(e.kind(), format!("reading `{key}`: {e}")))?;
        self.trace(key, false, bytes.len());
        Ok(bytes)
    }

    /// Writes a new object; fails if `key` exists.
    pub fn write(&self, key: &str, bytes: &[u8]) -> io::Result<()> {
        let path = self.path(key)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| io::Error::new(e.kind(), format!("writing `{key}`: {e}")))?;
        f.write_all(bytes)?;
        self.trace(key, true, bytes.len());
        Ok(())
    }

    /// A key under `prefix` no other call in this process returns.
    pub fn fresh_key(&self, prefix: &str, stem: &str) -> String {
        let n = NEXT_KEY.fetch_add(1, Ordering::Relaxed);
        format!("{prefix}/{}-{stem}-{n:08}.ptfc", std::process::id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowgate::metrics;

    #[test]
    fn io_is_accounted_by_class() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recorder::in_memory();
        let store = Store::open(dir.path(), Some(&rec)).unwrap();
        store.write("in/a.ptfc", b"12345").unwrap();
        let k = store.fresh_key(TMP, "run");
        store.write(&k, b"xyz").unwrap();
        assert_eq!(store.read(&k).unwrap(), b"xyz");
        assert_eq!(store.read("in/a.ptfc").unwrap().len(), 5);
        let by = metrics::io_by_component(&rec.events());
        assert_eq!(by["io/input-write"], 5);
        assert_eq!(by["io/input-read"], 5);
        assert_eq!(by["io/intermediate-write"], 3);
        assert_eq!(by["io/intermediate-read"], 3);
        assert_eq!(metrics::io_bytes(&rec.events()), 16);
    }

    #[test]
    fn objects_are_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path(), None).unwrap();
        store.write("a", b"1").unwrap();
        assert_eq!(
            store.write("a", b"2").unwrap_err().kind(),
            io::ErrorKind::AlreadyExists
        );
        assert!(store.read("missing").is_err());
        assert!(store.path("../escape").is_err());
        assert!(store.path("/abs").is_err());
        assert_ne!(store.fresh_key(TMP, "x"), store.fresh_key(TMP, "x"));
    }
}
