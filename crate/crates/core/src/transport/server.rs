use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::credit::CreditLink;
use crate::error::GateError;
use crate::gate::Gate;
use crate::model::{FeedMetadata, MetadataFrame, Payload};

use super::proto::{self, FRONTEND_GATE};
use super::wire::{read_frame, write_frame, FrameKind, ReadError, WireFrame, PROTOCOL_VERSION};

/// How often a session blocked on a gate checks that its peer is still there.
const PEER_CHECK: Duration = Duration::from_millis(100);

/// Failure reported by a front end.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum FrontError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Failed(String),
    #[error("unknown ticket {0}")]
    NotFound(u64),
    #[error("service is shut down")]
    Closed,
}

impl FrontError {
    fn kind(&self) -> &'static str {
        match self {
            FrontError::Invalid(_) => "invalid",
            FrontError::Failed(_) => "failed",
            FrontError::NotFound(_) => "not_found",
            FrontError::Closed => "closed",
        }
    }
}

/// Request-response interface of a running service.
pub trait FrontEnd: Send + Sync {
    /// Returns `(batch_id, arity)`.
    fn submit(&self, inputs: Vec<Payload>) -> Result<(u64, u64), FrontError>;
    fn collect(&self, batch: u64) -> Result<Vec<Payload>, FrontError>;
    fn shutdown(&self);
}

/// Called with the peer name and the batches whose partitions or feeds were
/// handed out over a connection that then broke.
pub type LostHook = Arc<dyn Fn(&str, Vec<u64>) + Send + Sync>;

/// Gates, credit links and front end one process exposes to its peers.
pub struct GateHost {
    device: String,
    gates: HashMap<u32, Arc<Gate>>,
    links: HashMap<u32, Arc<CreditLink>>,
    frontend: OnceLock<Arc<dyn FrontEnd>>,
    on_lost: OnceLock<LostHook>,
}

impl std::fmt::Debug for GateHost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GateHost")
            .field("device", &self.device)
            .field("gates", &self.gates.keys().collect::<Vec<_>>())
            .field("links", &self.links.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl GateHost {
    pub fn new(device: impl Into<String>) -> Self {
        Self {
            device: device.into(),
            gates: HashMap::new(),
            links: HashMap::new(),
            frontend: OnceLock::new(),
            on_lost: OnceLock::new(),
        }
    }

    pub fn with_gate(mut self, id: u32, gate: Arc<Gate>) -> Self {
        assert_ne!(id, FRONTEND_GATE, "gate id {id} is reserved");
        self.gates.insert(id, gate);
        self
    }

    pub fn with_link(mut self, link: Arc<CreditLink>) -> Self {
        self.links.insert(link.id(), link);
        self
    }

    pub fn device(&self) -> &str {
        &self.device
    }

    pub fn gate(&self, id: u32) -> Option<&Arc<Gate>> {
        self.gates.get(&id)
    }

    pub fn set_frontend(&self, frontend: Arc<dyn FrontEnd>) {
        if self.frontend.set(frontend).is_err() {
            panic!("front end of `{}` set twice", self.device);
        }
    }

    pub fn set_lost_hook(&self, hook: LostHook) {
        if self.on_lost.set(hook).is_err() {
            panic!("lost-connection hook of `{}` set twice", self.device);
        }
    }

    pub fn all_shut_down(&self) -> bool {
        self.gates.values().all(|g| g.is_shut_down())
    }
}

/// Accepts connections and serves each on its own thread.
#[derive(Debug)]
pub struct GateServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    host: Arc<GateHost>,
}

impl GateServer {
    pub fn bind(addr: &str, host: Arc<GateHost>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let stop = stop.clone();
            let host = host.clone();
            thread::Builder::new()
                .name(format!("accept-{}", host.device))
                .spawn(move || accept_loop(listener, host, stop))?
        };
        Ok(Self {
            addr: local,
            stop,
            accept: Some(accept),
            host,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn host(&self) -> &Arc<GateHost> {
        &self.host
    }

    /// Stops accepting; established connections live on until their peers
    /// hang up.
    pub fn stop(&mut self) {
        if let Some(handle) = self.accept.take() {
            self.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(self.addr);
            let _ = handle.join();
        }
    }
}

impl Drop for GateServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, host: Arc<GateHost>, stop: Arc<AtomicBool>) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        match stream {
            Ok(stream) => {
                let conn_host = host.clone();
                let spawned = thread::Builder::new()
                    .name(format!("conn-{}", host.device))
                    .spawn(move || {
                        if let Err(e) = serve_connection(&conn_host, stream) {
                            log::debug!("{}: connection ended: {e}", conn_host.device);
                        }
                    });
                if let Err(e) = spawned {
                    log::error!("{}: cannot spawn connection thread: {e}", host.device);
                }
            }
            Err(e) => log::warn!("{}: accept failed: {e}", host.device),
        }
    }
}

struct Session<'a> {
    host: &'a GateHost,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    peer: String,
    /// Outer batch ids handed out on this connection.
    delivered: Vec<u64>,
}

fn serve_connection(host: &GateHost, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let peer_addr = stream.peer_addr()?.to_string();
    let mut s = Session {
        host,
        reader: BufReader::new(stream.try_clone()?),
        writer: BufWriter::new(stream),
        peer: peer_addr,
        delivered: Vec::new(),
    };
    let hello = match read_frame(&mut s.reader) {
        Ok(f) => f,
        Err(ReadError::Eof) => return Ok(()),
        Err(e) => return Err(io::Error::other(e.to_string())),
    };
    match proto::parse_hello(&hello) {
        Ok((PROTOCOL_VERSION, device)) => {
            s.peer = format!("{device}@{}", s.peer);
            s.write(&proto::hello(&host.device))?;
            s.writer.flush()?;
        }
        Ok((version, device)) => {
            log::error!(
                "{}: peer {device} speaks protocol {version}, expected {PROTOCOL_VERSION}",
                host.device
            );
            s.write(&proto::error(0, "version", &format!("protocol {PROTOCOL_VERSION} required")))?;
            return s.writer.flush();
        }
        Err(e) => {
            s.write(&proto::error(0, "protocol", &e))?;
            return s.writer.flush();
        }
    }
    let result = s.run();
    if !s.delivered.is_empty() && result.is_err() {
        if let Some(hook) = host.on_lost.get() {
            hook(&s.peer, std::mem::take(&mut s.delivered));
        }
    }
    result
}

impl Session<'_> {
    /// Whether the peer hung up while we wait on a gate for it.
    fn peer_gone(&self) -> bool {
        if !self.reader.buffer().is_empty() {
            return false;
        }
        let sock = self.reader.get_ref();
        if sock.set_read_timeout(Some(Duration::from_millis(1))).is_err() {
            return true;
        }
        let gone = match sock.peek(&mut [0u8; 1]) {
            Ok(n) => n == 0,
            Err(e) => !matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut),
        };
        let _ = sock.set_read_timeout(None);
        gone
    }

    fn write(&mut self, frame: &WireFrame) -> io::Result<()> {
        write_frame(&mut self.writer, frame)
    }

    fn run(&mut self) -> io::Result<()> {
        loop {
            if self.reader.buffer().is_empty() {
                self.writer.flush()?;
            }
            let frame = match read_frame(&mut self.reader) {
                Ok(f) => f,
                Err(ReadError::Eof) => {
                    return if self.delivered.is_empty() {
                        Ok(())
                    } else {
                        Err(io::ErrorKind::ConnectionAborted.into())
                    }
                }
                Err(ReadError::Io(e)) => return Err(e),
                Err(ReadError::Protocol(e)) => {
                    log::error!("{}: bad frame from {}: {e}", self.host.device, self.peer);
                    self.write(&proto::error(0, "protocol", &e.to_string()))?;
                    self.writer.flush()?;
                    return Err(io::Error::new(io::ErrorKind::InvalidData, e));
                }
            };
            if let Some(reply) = self.handle(frame)? {
                self.write(&reply)?;
            }
        }
    }

    fn handle(&mut self, frame: WireFrame) -> io::Result<Option<WireFrame>> {
        let id = frame.gate_id;
        if id == FRONTEND_GATE && frame.kind != FrameKind::Credit {
            return self.handle_frontend(frame);
        }
        let reply = match frame.kind {
            FrameKind::Credit => {
                match (self.host.links.get(&id), frame.frames.first()) {
                    (Some(link), Some(f)) => {
                        if let Err(e) = link.release(f.id) {
                            log::error!("{}: {e}", self.host.device);
                        }
                    }
                    _ => log::error!("{}: CREDIT for unknown link {id}", self.host.device),
                }
                None
            }
            FrameKind::Enqueue => Some(self.with_gate(id, |s, gate| {
                let ack = proto::ack(&frame);
                let feeds = match proto::into_feeds(frame) {
                    Ok(f) => f,
                    Err(e) => return Ok(proto::error(id, "protocol", &e)),
                };
                // Acknowledgements queued so far must not wait behind a
                // blocked enqueue.
                if gate.config().capacity.is_some() {
                    s.writer.flush()?;
                }
                match gate.enqueue_all(feeds) {
                    Ok(()) => Ok(ack),
                    Err(e) => Ok(proto::gate_error(id, &e)),
                }
            })?),
            FrameKind::DeqReq => Some(self.with_gate(id, |s, gate| {
                let ticket = gate.submit_dequeue();
                s.writer.flush()?;
                let served = loop {
                    if let Some(r) = gate.wait_dequeue_timeout(ticket, PEER_CHECK) {
                        break r;
                    }
                    if s.peer_gone() {
                        if let Some(Ok(d)) = gate.cancel_dequeue(ticket) {
                            s.delivered.push(d.metadata().batch().id);
                        }
                        return Err(io::ErrorKind::ConnectionAborted.into());
                    }
                };
                Ok(match served {
                    Ok(d) => {
                        if s.host.on_lost.get().is_some() {
                            s.delivered.push(d.metadata().batch().id);
                        }
                        proto::delivery(id, d)
                    }
                    Err(e) => error_or_shutdown(id, &e),
                })
            })?),
            FrameKind::Shutdown => Some(self.with_gate(id, |_, gate| {
                gate.shutdown();
                Ok(proto::shutdown(id))
            })?),
            kind => Some(proto::error(id, "protocol", &format!("unexpected {kind:?} frame"))),
        };
        Ok(reply)
    }

    fn with_gate(
        &mut self,
        id: u32,
        f: impl FnOnce(&mut Self, &Arc<Gate>) -> io::Result<WireFrame>,
    ) -> io::Result<WireFrame> {
        match self.host.gates.get(&id).cloned() {
            Some(gate) => f(self, &gate),
            None => Ok(proto::error(id, "unknown_gate", &format!("no gate {id} on {}", self.host.device))),
        }
    }

    fn handle_frontend(&mut self, frame: WireFrame) -> io::Result<Option<WireFrame>> {
        let Some(fe) = self.host.frontend.get().cloned() else {
            return Ok(Some(proto::error(
                FRONTEND_GATE,
                "unknown_gate",
                &format!("{} serves no requests", self.host.device),
            )));
        };
        let fail = |batch: u64, e: FrontError| WireFrame {
            frames: vec![MetadataFrame { id: batch, arity: 1 }],
            ..proto::error(FRONTEND_GATE, e.kind(), &e.to_string())
        };
        let reply = match frame.kind {
            FrameKind::Enqueue => {
                let result = proto::split_members(frame.payload)
                    .map_err(FrontError::Invalid)
                    .and_then(|inputs| fe.submit(inputs));
                match result {
                    Ok((batch, arity)) => WireFrame {
                        frames: vec![MetadataFrame { id: batch, arity }],
                        ..WireFrame::control(FrameKind::Enqueue, FRONTEND_GATE)
                    },
                    Err(e) => fail(0, e),
                }
            }
            FrameKind::DeqReq => {
                let Some(batch) = frame.frames.first().map(|f| f.id) else {
                    return Ok(Some(proto::error(FRONTEND_GATE, "protocol", "collect without ticket")));
                };
                self.writer.flush()?;
                match fe.collect(batch) {
                    Ok(results) => {
                        let md = FeedMetadata::new(batch, results.len().max(1) as u64)
                            .expect("positive arity");
                        proto::members(FrameKind::DeqResp, FRONTEND_GATE, &md, results)
                    }
                    Err(e) => fail(batch, e),
                }
            }
            FrameKind::Shutdown => {
                // Acknowledge first: the process may exit once the service
                // stops.
                self.write(&proto::shutdown(FRONTEND_GATE))?;
                self.writer.flush()?;
                fe.shutdown();
                return Ok(None);
            }
            kind => proto::error(FRONTEND_GATE, "protocol", &format!("unexpected {kind:?} frame")),
        };
        Ok(Some(reply))
    }
}

fn error_or_shutdown(id: u32, e: &GateError) -> WireFrame {
    if e.is_closed() {
        proto::shutdown(id)
    } else {
        proto::gate_error(id, e)
    }
}
