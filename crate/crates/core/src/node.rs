//! Transport-independent protocol endpoints.
//!
//! IOCs, the gateway and clients are written as [`Node`]s: state machines fed
//! connection events and decoded frames, emitting [`Io`] requests. The same
//! node runs on the virtual-time network in [`crate::sim`] or on real sockets
//! in [`crate::tcp`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::proto::{Frame, Message};

/// Milliseconds on the node's clock (virtual or since driver start).
pub type Millis = u64;

pub const ECHO_INTERVAL_MS: Millis = 5_000;
/// A peer is dead after two heartbeat intervals without inbound traffic.
pub const DEAD_AFTER_MS: Millis = 2 * ECHO_INTERVAL_MS;

const OUTBOUND_BIT: u64 = 1 << 63;

/// Connection handle, unique within one node. Inbound ids are assigned by
/// the driver, outbound ids by the node (high bit set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConnId(pub u64);

impl ConnId {
    pub fn outbound(n: u64) -> Self {
        ConnId(n | OUTBOUND_BIT)
    }

    pub fn is_outbound(self) -> bool {
        self.0 & OUTBOUND_BIT != 0
    }
}

impl fmt::Display for ConnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_outbound() {
            write!(f, "out#{}", self.0 & !OUTBOUND_BIT)
        } else {
            write!(f, "in#{}", self.0)
        }
    }
}

/// `host:port` of a server.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint(pub String);

impl Endpoint {
    pub fn new(s: impl Into<String>) -> Self {
        Endpoint(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {
                Ok(Endpoint(s.to_string()))
            }
            _ => Err(format!("endpoint {s:?} is not HOST:PORT")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Io {
    Send(ConnId, Frame),
    Connect(ConnId, Endpoint),
    Close(ConnId),
}

pub trait Node {
    /// A peer connected to us; returning `false` refuses the connection.
    fn on_accept(&mut self, conn: ConnId, now: Millis) -> bool;
    /// An outbound [`Io::Connect`] succeeded.
    fn on_connected(&mut self, conn: ConnId, now: Millis);
    /// An outbound [`Io::Connect`] failed; the id is dead.
    fn on_connect_failed(&mut self, conn: ConnId, now: Millis);
    fn on_frame(&mut self, conn: ConnId, frame: Frame, now: Millis);
    /// The peer closed or the transport failed. Not called for connections
    /// the node closed itself.
    fn on_closed(&mut self, conn: ConnId, now: Millis);
    fn on_tick(&mut self, now: Millis);
    /// Earliest time at which `on_tick` has work to do.
    fn next_deadline(&self) -> Option<Millis>;
    fn drain_io(&mut self) -> Vec<Io>;
}

/// Output buffer shared by the node implementations.
#[derive(Debug, Default)]
pub(crate) struct Outbox {
    io: Vec<Io>,
}

impl Outbox {
    pub fn send(&mut self, conn: ConnId, msg: &Message) {
        self.io.push(Io::Send(conn, msg.frame()));
    }

    pub fn connect(&mut self, conn: ConnId, endpoint: Endpoint) {
        self.io.push(Io::Connect(conn, endpoint));
    }

    pub fn close(&mut self, conn: ConnId) {
        self.io.push(Io::Close(conn));
    }

    pub fn drain(&mut self) -> Vec<Io> {
        std::mem::take(&mut self.io)
    }
}

/// Heartbeat bookkeeping for one connection.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Liveness {
    pub last_rx: Millis,
    pub last_echo: Millis,
}

impl Liveness {
    pub fn new(now: Millis) -> Self {
        Liveness {
            last_rx: now,
            last_echo: now,
        }
    }

    pub fn dead(&self, now: Millis) -> bool {
        now.saturating_sub(self.last_rx) >= DEAD_AFTER_MS
    }

    pub fn echo_due(&self, now: Millis) -> bool {
        now.saturating_sub(self.last_echo) >= ECHO_INTERVAL_MS
    }

    pub fn next_deadline(&self) -> Millis {
        (self.last_echo + ECHO_INTERVAL_MS).min(self.last_rx + DEAD_AFTER_MS)
    }
}
