use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use crate::credit::CreditSink;
use crate::error::GateError;
use crate::gate::GateOps;
use crate::model::{Delivery, Feed, FeedMetadata, MetadataFrame, Payload};

use super::proto;
use super::wire::{read_frame, write_frame, FrameKind, ReadError, WireFrame, PROTOCOL_VERSION};
use super::TransportError;

const ENQUEUE_CHUNK: usize = 16;
/// Feeds per ENQUEUE frame.
const RUN_LEN: usize = 256;
const RUN_BYTES: usize = 1 << 20;

/// How long to keep trying to reach a peer.
#[derive(Clone, Copy, Debug)]
pub struct RetryBudget {
    pub attempts: u32,
    pub delay: Duration,
}

impl Default for RetryBudget {
    fn default() -> Self {
        Self {
            attempts: 100,
            delay: Duration::from_millis(50),
        }
    }
}

impl RetryBudget {
    pub fn once() -> Self {
        Self {
            attempts: 1,
            delay: Duration::ZERO,
        }
    }
}

/// A framed connection that has completed the HELLO exchange.
#[derive(Debug)]
pub struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    peer: String,
}

impl Connection {
    pub fn connect(addr: &str, device: &str, budget: RetryBudget) -> Result<Self, TransportError> {
        Self::connect_with_version(addr, device, budget, PROTOCOL_VERSION)
    }

    #[doc(hidden)]
    pub fn connect_with_version(
        addr: &str,
        device: &str,
        budget: RetryBudget,
        version: u16,
    ) -> Result<Self, TransportError> {
        let mut last = None;
        for attempt in 0..budget.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(budget.delay);
            }
            let resolved = match addr.to_socket_addrs() {
                Ok(mut a) => a.next(),
                Err(e) => {
                    last = Some(e);
                    continue;
                }
            };
            let Some(sock) = resolved else { continue };
            match TcpStream::connect(sock) {
                Ok(stream) => return Self::handshake(stream, addr, device, version),
                Err(e) => last = Some(e),
            }
        }
        Err(TransportError::Unreachable {
            addr: addr.to_owned(),
            attempts: budget.attempts.max(1),
            detail: last.map_or_else(|| "address did not resolve".to_owned(), |e| e.to_string()),
        })
    }

    fn handshake(
        stream: TcpStream,
        addr: &str,
        device: &str,
        version: u16,
    ) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        let mut conn = Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            peer: addr.to_owned(),
        };
        let mut hello = proto::hello(device);
        hello.payload[0].1 = version.to_le_bytes().to_vec();
        conn.send(&hello)?;
        let reply = conn.recv()?;
        if reply.kind == FrameKind::Error {
            let (_, message) = proto::parse_error(&reply);
            return Err(TransportError::Bootstrap(format!("{addr} refused HELLO: {message}")));
        }
        let (theirs, name) = proto::parse_hello(&reply)
            .map_err(|e| TransportError::Bootstrap(format!("{addr}: {e}")))?;
        if theirs != version {
            return Err(TransportError::Bootstrap(format!(
                "{addr} ({name}) speaks protocol {theirs}, expected {version}"
            )));
        }
        conn.peer = format!("{name}@{addr}");
        Ok(conn)
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    /// A handle that can close the socket while another thread is blocked
    /// on it.
    pub fn closer(&self) -> std::io::Result<TcpStream> {
        self.writer.get_ref().try_clone()
    }

    pub fn send(&mut self, frame: &WireFrame) -> Result<(), TransportError> {
        self.queue(frame)?;
        self.flush()
    }

    /// Buffers a frame without flushing.
    pub fn queue(&mut self, frame: &WireFrame) -> Result<(), TransportError> {
        write_frame(&mut self.writer, frame)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TransportError> {
        self.writer.flush()?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<WireFrame, TransportError> {
        read_frame(&mut self.reader).map_err(|e| match e {
            ReadError::Eof => TransportError::Closed(self.peer.clone()),
            ReadError::Io(e) => e.into(),
            ReadError::Protocol(e) => e.into(),
        })
    }
}

/// Proxy for a gate hosted by another process. Each proxy owns one
/// connection; give every runner its own proxy.
#[derive(Debug)]
pub struct RemoteGate {
    name: String,
    addr: String,
    device: String,
    gate_id: u32,
    conn: Mutex<Option<Connection>>,
    closer: TcpStream,
}

impl RemoteGate {
    pub fn connect(
        name: impl Into<String>,
        addr: &str,
        gate_id: u32,
        device: &str,
        budget: RetryBudget,
    ) -> Result<Self, TransportError> {
        let conn = Connection::connect(addr, device, budget)?;
        Ok(Self {
            name: name.into(),
            addr: addr.to_owned(),
            device: device.to_owned(),
            gate_id,
            closer: conn.closer()?,
            conn: Mutex::new(Some(conn)),
        })
    }

    /// Drops the connection without touching the remote gate. Blocked and
    /// later calls fail with `ConnectionLost`.
    pub fn disconnect(&self) {
        let _ = self.closer.shutdown(std::net::Shutdown::Both);
    }

    pub fn gate_id(&self) -> u32 {
        self.gate_id
    }

    pub fn address(&self) -> &str {
        &self.addr
    }

    fn lost(&self, e: TransportError) -> GateError {
        GateError::ConnectionLost(format!("gate `{}` at {}: {e}", self.name, self.addr))
    }

    /// Runs `f` on the connection; a transport failure poisons it.
    fn with_conn<T>(
        &self,
        f: impl FnOnce(&mut Connection) -> Result<T, TransportError>,
    ) -> Result<T, GateError> {
        let mut guard = self.conn.lock().unwrap();
        let conn = guard
            .as_mut()
            .ok_or_else(|| self.lost(TransportError::Closed(self.addr.clone())))?;
        f(conn).map_err(|e| {
            *guard = None;
            self.lost(e)
        })
    }

    fn check_ack(&self, reply: WireFrame) -> Result<(), GateError> {
        match reply.kind {
            FrameKind::Enqueue => Ok(()),
            FrameKind::Error => Err(proto::into_gate_error(&reply)),
            FrameKind::Shutdown => Err(GateError::Closed(self.name.clone())),
            other => Err(GateError::Remote(format!("unexpected {other:?} reply to ENQUEUE"))),
        }
    }
}

impl GateOps for RemoteGate {
    fn name(&self) -> &str {
        &self.name
    }

    fn enqueue(&self, feed: Feed) -> Result<(), GateError> {
        let frame = proto::enqueue(self.gate_id, &feed);
        let reply = self.with_conn(|c| {
            c.send(&frame)?;
            c.recv()
        })?;
        self.check_ack(reply)
    }

    /// Sends runs of consecutive feeds of one batch as single frames, and
    /// pipelines the frames in chunks so neither side's socket buffer fills
    /// up while the other is still writing.
    fn enqueue_all(&self, feeds: Vec<Feed>) -> Result<(), GateError> {
        let size = |f: &Feed| f.payload.entries().iter().map(|(n, v)| n.len() + v.len()).sum::<usize>();
        let mut runs: Vec<&[Feed]> = Vec::new();
        let (mut start, mut bytes) = (0, 0);
        for i in 0..feeds.len() {
            bytes += size(&feeds[i]);
            let next = feeds.get(i + 1);
            if next.map_or(true, |n| !proto::continues_run(&feeds[i], n))
                || i + 1 - start == RUN_LEN
                || bytes >= RUN_BYTES
            {
                runs.push(&feeds[start..=i]);
                (start, bytes) = (i + 1, 0);
            }
        }
        for chunk in runs.chunks(ENQUEUE_CHUNK) {
            let replies = self.with_conn(|c| {
                for run in chunk {
                    c.queue(&proto::enqueue_run(self.gate_id, run))?;
                }
                c.flush()?;
                (0..chunk.len()).map(|_| c.recv()).collect::<Result<Vec<_>, _>>()
            })?;
            replies.into_iter().try_for_each(|r| self.check_ack(r))?;
        }
        Ok(())
    }

    fn take(&self) -> Result<Delivery, GateError> {
        let reply = self.with_conn(|c| {
            c.send(&proto::dequeue_request(self.gate_id))?;
            c.recv()
        })?;
        match reply.kind {
            FrameKind::DeqResp => proto::into_delivery(reply).map_err(GateError::Remote),
            FrameKind::Shutdown => Err(GateError::Closed(self.name.clone())),
            FrameKind::Error => Err(proto::into_gate_error(&reply)),
            other => Err(GateError::Remote(format!("unexpected {other:?} reply to DEQ_REQ"))),
        }
    }

    /// Uses a fresh connection, since the proxy's own may be blocked in a
    /// dequeue.
    fn shutdown(&self) {
        let result = Connection::connect(&self.addr, &self.device, RetryBudget::once())
            .and_then(|mut c| {
                c.send(&proto::shutdown(self.gate_id))?;
                c.recv()
            });
        if let Err(e) = result {
            log::warn!("shutting down remote gate `{}`: {e}", self.name);
        }
    }
}

/// Sends credits of a link whose upstream gate lives in another process.
#[derive(Debug)]
pub struct RemoteCreditSink {
    link_id: u32,
    conn: Mutex<Connection>,
}

impl RemoteCreditSink {
    pub fn connect(
        addr: &str,
        link_id: u32,
        device: &str,
        budget: RetryBudget,
    ) -> Result<Self, TransportError> {
        Ok(Self {
            link_id,
            conn: Mutex::new(Connection::connect(addr, device, budget)?),
        })
    }
}

impl CreditSink for RemoteCreditSink {
    fn release(&self, batch_id: u64) {
        let mut conn = self.conn.lock().unwrap();
        if let Err(e) = conn.send(&proto::credit(self.link_id, batch_id)) {
            log::error!("credit for batch {batch_id} on link {} lost: {e}", self.link_id);
        }
    }
}

/// Why a remote request failed.
#[derive(Debug, thiserror::Error)]
pub enum RequestError {
    #[error("request {batch} failed: {cause}")]
    Failed { batch: u64, cause: String },
    #[error("unknown ticket {0}")]
    NotFound(u64),
    #[error("service is shut down")]
    Closed,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Client of a service front end.
#[derive(Debug)]
pub struct ServiceClient {
    conn: Connection,
}

impl ServiceClient {
    pub fn connect(addr: &str, budget: RetryBudget) -> Result<Self, TransportError> {
        Ok(Self {
            conn: Connection::connect(addr, "client", budget)?,
        })
    }

    fn request(&mut self, frame: &WireFrame) -> Result<WireFrame, RequestError> {
        self.conn.send(frame)?;
        let reply = self.conn.recv()?;
        if reply.kind == FrameKind::Error {
            let (kind, message) = proto::parse_error(&reply);
            let batch = reply.frames.first().map_or(0, |f| f.id);
            return Err(match kind.as_str() {
                "failed" => RequestError::Failed {
                    batch,
                    cause: message,
                },
                "not_found" => RequestError::NotFound(batch),
                "closed" => RequestError::Closed,
                _ => RequestError::Invalid(message),
            });
        }
        Ok(reply)
    }

    /// Submits a request; returns `(batch_id, arity)`.
    pub fn submit(&mut self, inputs: Vec<Payload>) -> Result<(u64, u64), RequestError> {
        let md = FeedMetadata::new(0, inputs.len().max(1) as u64).expect("positive arity");
        let frame = proto::members(FrameKind::Enqueue, proto::FRONTEND_GATE, &md, inputs);
        let reply = self.request(&frame)?;
        let f = reply
            .frames
            .first()
            .ok_or_else(|| RequestError::Invalid("submit reply without ticket".into()))?;
        Ok((f.id, f.arity))
    }

    pub fn collect(&mut self, batch: u64) -> Result<Vec<Payload>, RequestError> {
        let frame = WireFrame {
            frames: vec![MetadataFrame { id: batch, arity: 1 }],
            ..proto::dequeue_request(proto::FRONTEND_GATE)
        };
        let reply = self.request(&frame)?;
        proto::split_members(reply.payload).map_err(RequestError::Invalid)
    }

    /// Asks the service to shut down.
    pub fn shutdown(&mut self) -> Result<(), RequestError> {
        self.request(&proto::shutdown(proto::FRONTEND_GATE)).map(drop)
    }
}
