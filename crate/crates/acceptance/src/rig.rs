//! A set of gates reachable either in this process or over loopback from a
//! `host-gates` child process.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use flowgate::gate::GateOps;
use flowgate::node::GateSet;
use flowgate::trace::{read_log, Recorder, TraceEvent};
use flowgate::transport::{GateHost, RemoteGate, RetryBudget};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Plain,
    Aggregate(u64),
    Partition(u64),
}

#[derive(Clone, Debug)]
pub struct GateDef {
    pub name: String,
    pub mode: Mode,
    pub capacity: Option<usize>,
    pub reassemble: bool,
}

/// Gates and global credit links, declared before the rig starts.
#[derive(Clone, Debug, Default)]
pub struct Layout {
    gates: Vec<GateDef>,
    links: Vec<(u32, u32, u64)>,
}

impl Layout {
    /// Adds a gate; returns its id.
    pub fn gate(&mut self, name: impl Into<String>, mode: Mode) -> u32 {
        self.add(GateDef {
            name: name.into(),
            mode,
            capacity: None,
            reassemble: false,
        })
    }

    pub fn add(&mut self, def: GateDef) -> u32 {
        self.gates.push(def);
        (self.gates.len() - 1) as u32
    }

    /// Credit link: `down` closing a batch returns a credit to `up`.
    pub fn link(&mut self, up: u32, down: u32, initial: u64) {
        self.links.push((up, down, initial));
    }

    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        for (id, g) in self.gates.iter().enumerate() {
            let _ = writeln!(s, "[[gate]]\nid = {id}\nname = {:?}", g.name);
            match g.mode {
                Mode::Plain => {}
                Mode::Aggregate(n) => {
                    let _ = writeln!(s, "mode = \"aggregate\"\nsize = {n}");
                }
                Mode::Partition(n) => {
                    let _ = writeln!(s, "mode = \"partition\"\nsize = {n}");
                }
            }
            if let Some(c) = g.capacity {
                let _ = writeln!(s, "capacity = {c}");
            }
            if g.reassemble {
                s.push_str("reassemble = true\n");
            }
            s.push('\n');
        }
        for (id, (up, down, initial)) in self.links.iter().enumerate() {
            let _ = writeln!(
                s,
                "[[link]]\nid = {id}\nupstream = {up}\ndownstream = {down}\ninitial = {initial}\n"
            );
        }
        s
    }
}

/// Where a rig's gates live.
#[derive(Clone, Debug)]
pub enum Backend {
    InProcess,
    /// A `host-gates` child of this node binary.
    Loopback(PathBuf),
}

impl Backend {
    pub fn start(&self, layout: &Layout) -> Result<Rig, String> {
        match self {
            Backend::InProcess => Rig::in_process(layout),
            Backend::Loopback(bin) => Rig::loopback(layout, bin),
        }
    }
}

pub struct Rig {
    kind: RigKind,
    gates: usize,
}

enum RigKind {
    InProcess {
        host: GateHost,
        recorder: Recorder,
    },
    Loopback {
        child: HostProcess,
        addr: String,
        log: PathBuf,
        _dir: tempfile::TempDir,
    },
}

impl Rig {
    fn in_process(layout: &Layout) -> Result<Self, String> {
        let set = GateSet::parse(&layout.to_toml()).map_err(|e| e.to_string())?;
        let recorder = Recorder::in_memory();
        let host = set.build(Some(&recorder)).map_err(|e| e.to_string())?;
        Ok(Self {
            kind: RigKind::InProcess { host, recorder },
            gates: layout.gates.len(),
        })
    }

    fn loopback(layout: &Layout, bin: &Path) -> Result<Self, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let gates = dir.path().join("gates.toml");
        let log = dir.path().join("gates.log");
        std::fs::write(&gates, layout.to_toml()).map_err(|e| e.to_string())?;
        let mut child = Command::new(bin)
            .arg("host-gates")
            .arg("--gates")
            .arg(&gates)
            .arg("--log")
            .arg(&log)
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawning {}: {e}", bin.display()))?;
        let mut line = String::new();
        BufReader::new(child.stdout.as_mut().expect("piped stdout"))
            .read_line(&mut line)
            .map_err(|e| e.to_string())?;
        let Some(addr) = line.trim().strip_prefix("listening on ") else {
            let _ = child.kill();
            return Err(format!("gate host printed {line:?}"));
        };
        Ok(Self {
            kind: RigKind::Loopback {
                addr: addr.to_owned(),
                child: HostProcess(child),
                log,
                _dir: dir,
            },
            gates: layout.gates.len(),
        })
    }

    pub fn is_loopback(&self) -> bool {
        matches!(self.kind, RigKind::Loopback { .. })
    }

    /// A handle on gate `id`. Over loopback every call opens its own
    /// connection, so callers in different threads never share one.
    pub fn gate(&self, id: u32) -> Arc<dyn GateOps> {
        match &self.kind {
            RigKind::InProcess { host, .. } => host.gate(id).expect("gate in layout").clone(),
            RigKind::Loopback { addr, .. } => Arc::new(
                RemoteGate::connect(format!("gate{id}"), addr, id, "acceptance", RetryBudget::default())
                    .expect("connect to gate host"),
            ),
        }
    }

    /// Shuts every gate down and returns the trace.
    pub fn finish(mut self) -> Result<Vec<TraceEvent>, String> {
        match &mut self.kind {
            RigKind::InProcess { host, .. } => {
                for id in 0..self.gates as u32 {
                    host.gate(id).expect("gate in layout").shutdown();
                }
            }
            RigKind::Loopback { child, addr, .. } => {
                for id in 0..self.gates as u32 {
                    // The host exits once every gate is shut down, which
                    // callers may already have done.
                    if child.0.try_wait().map_err(|e| e.to_string())?.is_some() {
                        break;
                    }
                    match RemoteGate::connect(format!("gate{id}"), addr, id, "acceptance", RetryBudget::default()) {
                        Ok(gate) => gate.shutdown(),
                        Err(_) if child.0.try_wait().map_err(|e| e.to_string())?.is_some() => break,
                        Err(e) => return Err(format!("connecting to gate host: {e}")),
                    }
                }
            }
        }
        match self.kind {
            RigKind::InProcess { recorder, .. } => Ok(recorder.events()),
            RigKind::Loopback {
                mut child, log, ..
            } => {
                let deadline = Instant::now() + Duration::from_secs(20);
                loop {
                    match child.0.try_wait().map_err(|e| e.to_string())? {
                        Some(status) if status.success() => break,
                        Some(status) => return Err(format!("gate host exited with {status}")),
                        None if Instant::now() > deadline => {
                            let _ = child.0.kill();
                            return Err("gate host did not exit after shutdown".into());
                        }
                        None => thread::sleep(Duration::from_millis(20)),
                    }
                }
                read_log(&log).map_err(|e| format!("reading gate host log: {e}"))
            }
        }
    }
}

/// Kills the gate host if the rig is dropped before `finish`.
struct HostProcess(Child);

impl Drop for HostProcess {
    fn drop(&mut self) {
        if let Ok(None) = self.0.try_wait() {
            let _ = self.0.kill();
            let _ = self.0.wait();
        }
    }
}
