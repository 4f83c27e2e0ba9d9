//! Gates, credits and requests across process boundaries.
//!
//! Every connection starts with a HELLO exchange and then carries
//! length-prefixed [`WireFrame`]s. A server thread per connection turns
//! frames into operations on local gates; blocking semantics are kept by
//! deferring the reply until the operation completes.

mod client;
pub mod proto;
mod server;
pub mod wire;

pub use client::{Connection, RemoteCreditSink, RemoteGate, RequestError, RetryBudget, ServiceClient};
pub use server::{FrontEnd, FrontError, GateHost, GateServer, LostHook};
pub use wire::{FrameKind, ProtocolError, WireFrame, PROTOCOL_VERSION};

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("connection to {0} closed")]
    Closed(String),
    #[error("cannot reach {addr} after {attempts} attempts: {detail}")]
    Unreachable {
        addr: String,
        attempts: u32,
        detail: String,
    },
    #[error("bootstrap failed: {0}")]
    Bootstrap(String),
}
