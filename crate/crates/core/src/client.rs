//! Client side: name resolution over an ordered address list, get, put and
//! monitor.
//!
//! [`ClientCore`] is a [`Node`] like the servers, so the same code drives the
//! command-line tools over TCP and the harness clients in virtual time.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::node::{ConnId, Endpoint, Io, Liveness, Millis, Node, Outbox};
use crate::proto::{ChannelValue, Frame, Identity, Message, Severity, Status};

/// How long a SEARCH may go unanswered before it counts as negative.
pub const SEARCH_TIMEOUT_MS: Millis = 2_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{pv} is served by more than one endpoint: {}", join(.endpoints))]
    DuplicatePv {
        pv: String,
        endpoints: Vec<Endpoint>,
    },
    #[error("access denied")]
    AccessDenied,
    #[error("write denied")]
    WriteDenied,
    #[error("connection lost")]
    ConnLost,
    #[error("upstream down")]
    UpstreamDown,
    #[error("value has the wrong type for the channel")]
    BadType,
    #[error("invalid address list: {0}")]
    AddressList(String),
    #[error("timed out")]
    Timeout,
}

fn join(eps: &[Endpoint]) -> String {
    eps.iter()
        .map(Endpoint::as_str)
        .collect::<Vec<_>>()
        .join(", ")
}

impl ClientError {
    fn from_status(status: Status, pv: &str, write: bool) -> ClientError {
        match status {
            Status::Ok | Status::NotFound => ClientError::NotFound(pv.to_string()),
            Status::Denied if write => ClientError::WriteDenied,
            Status::Denied => ClientError::AccessDenied,
            Status::UpstreamDown => ClientError::UpstreamDown,
            Status::BadType => ClientError::BadType,
        }
    }

    /// Process exit code used by the command-line tools.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::NotFound(_) => 2,
            ClientError::AccessDenied | ClientError::WriteDenied => 3,
            ClientError::DuplicatePv { .. } => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressList {
    endpoints: Vec<Endpoint>,
    pub strict_duplicates: bool,
}

impl AddressList {
    pub fn new(endpoints: Vec<Endpoint>, strict_duplicates: bool) -> Result<Self, ClientError> {
        if endpoints.is_empty() {
            return Err(ClientError::AddressList("empty".into()));
        }
        for (i, e) in endpoints.iter().enumerate() {
            if endpoints[..i].contains(e) {
                return Err(ClientError::AddressList(format!("{e} listed twice")));
            }
        }
        Ok(AddressList {
            endpoints,
            strict_duplicates,
        })
    }

    pub fn endpoints(&self) -> &[Endpoint] {
        &self.endpoints
    }
}

impl FromStr for AddressList {
    type Err = ClientError;

    /// Comma or whitespace separated `HOST:PORT` entries, non-strict.
    fn from_str(s: &str) -> Result<Self, ClientError> {
        let endpoints = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<Endpoint>().map_err(ClientError::AddressList))
            .collect::<Result<Vec<_>, _>>()?;
        AddressList::new(endpoints, false)
    }
}

/// Outcome of a resolution given the answers collected so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Pending,
    Found(usize),
    NotFound,
    Duplicate(Vec<usize>),
}

/// `answers[i]` is endpoint `i`'s reply: `Some(true)` for SEARCH_OK,
/// `Some(false)` for a negative or missing reply, `None` while outstanding.
/// The result depends only on the answers, never on their arrival order.
pub fn decide(answers: &[Option<bool>], strict: bool) -> Decision {
    if strict {
        if answers.iter().any(Option::is_none) {
            return Decision::Pending;
        }
        let hits: Vec<usize> = (0..answers.len())
            .filter(|&i| answers[i] == Some(true))
            .collect();
        return match hits.len() {
            0 => Decision::NotFound,
            1 => Decision::Found(hits[0]),
            _ => Decision::Duplicate(hits),
        };
    }
    for (i, a) in answers.iter().enumerate() {
        match a {
            Some(true) => return Decision::Found(i),
            Some(false) => continue,
            None => return Decision::Pending,
        }
    }
    Decision::NotFound
}

pub type OpId = u64;

#[derive(Debug, Clone, PartialEq)]
pub enum ClientEvent {
    Resolved {
        op: OpId,
        pv: String,
        result: Result<Endpoint, ClientError>,
    },
    GetDone {
        op: OpId,
        pv: String,
        result: Result<ChannelValue, ClientError>,
    },
    PutDone {
        op: OpId,
        pv: String,
        result: Result<(), ClientError>,
    },
    Monitor {
        op: OpId,
        pv: String,
        value: ChannelValue,
        at: Millis,
    },
    /// The monitor stopped. With `retry_at` set it will resubscribe then.
    MonitorEnded {
        op: OpId,
        pv: String,
        error: ClientError,
        at: Millis,
        retry_at: Option<Millis>,
    },
}

impl ClientEvent {
    pub fn op(&self) -> OpId {
        match self {
            ClientEvent::Resolved { op, .. }
            | ClientEvent::GetDone { op, .. }
            | ClientEvent::PutDone { op, .. }
            | ClientEvent::Monitor { op, .. }
            | ClientEvent::MonitorEnded { op, .. } => *op,
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Resolve,
    Get,
    Put(ChannelValue),
    Monitor { retry: Option<Millis> },
}

#[derive(Debug)]
enum Phase {
    Resolving {
        answers: Vec<Option<bool>>,
        deadline: Millis,
    },
    Creating {
        ep: usize,
        cid: u32,
    },
    Waiting {
        ep: usize,
        cid: u32,
    },
    Monitoring {
        ep: usize,
        cid: u32,
    },
    /// Monitor waiting to resubscribe.
    Retry {
        at: Millis,
    },
}

#[derive(Debug)]
struct Op {
    pv: String,
    kind: Kind,
    phase: Phase,
    last: Option<ChannelValue>,
}

#[derive(Debug)]
enum ConnState {
    Down,
    Connecting { conn: ConnId, queued: Vec<Message> },
    Up { conn: ConnId, live: Liveness },
}

#[derive(Debug)]
pub struct ClientCore {
    list: AddressList,
    identity: Identity,
    conns: Vec<ConnState>,
    ops: BTreeMap<OpId, Op>,
    searches: HashMap<u32, (OpId, usize)>,
    chans: HashMap<u32, OpId>,
    next_op: OpId,
    next_cid: u32,
    next_conn: u64,
    events: Vec<ClientEvent>,
    out: Outbox,
    now: Millis,
}

impl ClientCore {
    pub fn new(list: AddressList, identity: Identity, now: Millis) -> Self {
        let conns = list.endpoints.iter().map(|_| ConnState::Down).collect();
        ClientCore {
            list,
            identity,
            conns,
            ops: BTreeMap::new(),
            searches: HashMap::new(),
            chans: HashMap::new(),
            next_op: 1,
            next_cid: 1,
            next_conn: 1,
            events: Vec::new(),
            out: Outbox::default(),
            now,
        }
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn address_list(&self) -> &AddressList {
        &self.list
    }

    /// Open connections to servers.
    pub fn connection_count(&self) -> usize {
        self.conns
            .iter()
            .filter(|c| matches!(c, ConnState::Up { .. }))
            .count()
    }

    pub fn take_events(&mut self) -> Vec<ClientEvent> {
        std::mem::take(&mut self.events)
    }

    /// Removes and returns the oldest event for `op`.
    pub fn take_event_for(&mut self, op: OpId) -> Option<ClientEvent> {
        let pos = self.events.iter().position(|e| e.op() == op)?;
        Some(self.events.remove(pos))
    }

    pub fn has_pending(&self) -> bool {
        !self.ops.is_empty()
    }

    pub fn resolve(&mut self, pv: &str, now: Millis) -> OpId {
        self.start(pv, Kind::Resolve, now)
    }

    pub fn get(&mut self, pv: &str, now: Millis) -> OpId {
        self.start(pv, Kind::Get, now)
    }

    pub fn put(&mut self, pv: &str, value: ChannelValue, now: Millis) -> OpId {
        self.start(pv, Kind::Put(value), now)
    }

    pub fn monitor(&mut self, pv: &str, now: Millis) -> OpId {
        self.start(pv, Kind::Monitor { retry: None }, now)
    }

    /// A monitor that resubscribes `retry_ms` after it ends for any reason
    /// other than cancellation.
    pub fn monitor_with_retry(&mut self, pv: &str, retry_ms: Millis, now: Millis) -> OpId {
        self.start(
            pv,
            Kind::Monitor {
                retry: Some(retry_ms),
            },
            now,
        )
    }

    /// Stops an operation. No events for it are produced afterwards.
    pub fn cancel(&mut self, op: OpId, now: Millis) {
        self.now = now;
        if let Some(o) = self.ops.remove(&op) {
            self.release(&o.phase);
        }
        self.events.retain(|e| e.op() != op);
    }

    /// Cancels everything and closes all server connections.
    pub fn disconnect(&mut self, now: Millis) {
        self.now = now;
        self.ops.clear();
        self.searches.clear();
        self.chans.clear();
        self.events.clear();
        for c in &mut self.conns {
            match std::mem::replace(c, ConnState::Down) {
                ConnState::Up { conn, .. } | ConnState::Connecting { conn, .. } => {
                    self.out.close(conn)
                }
                ConnState::Down => {}
            }
        }
    }

    fn start(&mut self, pv: &str, kind: Kind, now: Millis) -> OpId {
        self.now = now;
        let op = self.next_op;
        self.next_op += 1;
        self.ops.insert(
            op,
            Op {
                pv: pv.to_string(),
                kind,
                phase: Phase::Retry { at: now },
                last: None,
            },
        );
        self.begin_resolution(op);
        op
    }

    fn alloc_cid(&mut self) -> u32 {
        let cid = self.next_cid;
        self.next_cid = self.next_cid.wrapping_add(1).max(1);
        cid
    }

    fn send(&mut self, ep: usize, msg: Message) {
        match &mut self.conns[ep] {
            ConnState::Up { conn, .. } => {
                let conn = *conn;
                self.out.send(conn, &msg);
            }
            ConnState::Connecting { queued, .. } => queued.push(msg),
            ConnState::Down => {
                let conn = ConnId::outbound(self.next_conn);
                self.next_conn += 1;
                self.conns[ep] = ConnState::Connecting {
                    conn,
                    queued: vec![msg],
                };
                self.out.connect(conn, self.list.endpoints[ep].clone());
            }
        }
    }

    fn begin_resolution(&mut self, op: OpId) {
        let pv = self.ops[&op].pv.clone();
        let n = self.list.endpoints.len();
        self.ops.get_mut(&op).expect("present").phase = Phase::Resolving {
            answers: vec![None; n],
            deadline: self.now + SEARCH_TIMEOUT_MS,
        };
        for ep in 0..n {
            let cid = self.alloc_cid();
            self.searches.insert(cid, (op, ep));
            self.send(
                ep,
                Message::Search {
                    cid,
                    name: pv.clone(),
                },
            );
        }
    }

    fn answer(&mut self, op: OpId, ep: usize, found: bool) {
        let Some(o) = self.ops.get_mut(&op) else {
            return;
        };
        let Phase::Resolving { answers, .. } = &mut o.phase else {
            return;
        };
        answers[ep] = Some(found);
        match decide(answers, self.list.strict_duplicates) {
            Decision::Pending => {}
            Decision::Found(ep) => {
                self.searches.retain(|_, (o, _)| *o != op);
                self.resolved(op, ep);
            }
            Decision::NotFound => {
                self.searches.retain(|_, (o, _)| *o != op);
                let pv = self.ops[&op].pv.clone();
                self.fail(op, ClientError::NotFound(pv));
            }
            Decision::Duplicate(eps) => {
                self.searches.retain(|_, (o, _)| *o != op);
                let pv = self.ops[&op].pv.clone();
                let endpoints = eps
                    .iter()
                    .map(|&i| self.list.endpoints[i].clone())
                    .collect();
                self.fail(op, ClientError::DuplicatePv { pv, endpoints });
            }
        }
    }

    fn resolved(&mut self, op: OpId, ep: usize) {
        let o = self.ops.get_mut(&op).expect("present");
        if let Kind::Resolve = o.kind {
            let pv = o.pv.clone();
            self.ops.remove(&op);
            self.events.push(ClientEvent::Resolved {
                op,
                pv,
                result: Ok(self.list.endpoints[ep].clone()),
            });
            return;
        }
        let pv = o.pv.clone();
        let cid = self.alloc_cid();
        self.ops.get_mut(&op).expect("present").phase = Phase::Creating { ep, cid };
        self.chans.insert(cid, op);
        let identity = self.identity.clone();
        self.send(
            ep,
            Message::CreateChan {
                cid,
                name: pv,
                identity,
            },
        );
    }

    /// Drops server-side state held for `phase`.
    fn release(&mut self, phase: &Phase) {
        match *phase {
            Phase::Resolving { .. } | Phase::Retry { .. } => {}
            Phase::Creating { ep, cid }
            | Phase::Waiting { ep, cid }
            | Phase::Monitoring { ep, cid } => {
                self.chans.remove(&cid);
                if matches!(self.conns[ep], ConnState::Up { .. }) {
                    self.send(ep, Message::ClearChan { cid });
                }
            }
        }
    }

    /// Ends `op` with `error`, scheduling a retry for retrying monitors.
    fn fail(&mut self, op: OpId, error: ClientError) {
        let Some(o) = self.ops.remove(&op) else {
            return;
        };
        self.searches.retain(|_, (x, _)| *x != op);
        if let Phase::Creating { cid, .. }
        | Phase::Waiting { cid, .. }
        | Phase::Monitoring { cid, .. } = o.phase
        {
            self.chans.remove(&cid);
        }
        let pv = o.pv.clone();
        let event = match &o.kind {
            Kind::Resolve => ClientEvent::Resolved {
                op,
                pv,
                result: Err(error),
            },
            Kind::Get => ClientEvent::GetDone {
                op,
                pv,
                result: Err(error),
            },
            Kind::Put(_) => ClientEvent::PutDone {
                op,
                pv,
                result: Err(error),
            },
            Kind::Monitor { retry } => {
                let retry_at = retry.map(|r| self.now + r);
                if let Some(at) = retry_at {
                    self.ops.insert(
                        op,
                        Op {
                            phase: Phase::Retry { at },
                            ..o
                        },
                    );
                }
                ClientEvent::MonitorEnded {
                    op,
                    pv,
                    error,
                    at: self.now,
                    retry_at,
                }
            }
        };
        self.events.push(event);
    }

    fn conn_lost(&mut self, ep: usize) {
        self.conns[ep] = ConnState::Down;
        let searches: Vec<(u32, OpId)> = self
            .searches
            .iter()
            .filter(|(_, (_, e))| *e == ep)
            .map(|(c, (o, _))| (*c, *o))
            .collect();
        for (cid, op) in searches {
            self.searches.remove(&cid);
            self.answer(op, ep, false);
        }
        let affected: Vec<OpId> = self
            .ops
            .iter()
            .filter(|(_, o)| match o.phase {
                Phase::Creating { ep: e, .. }
                | Phase::Waiting { ep: e, .. }
                | Phase::Monitoring { ep: e, .. } => e == ep,
                _ => false,
            })
            .map(|(id, _)| *id)
            .collect();
        for op in affected {
            let o = &self.ops[&op];
            if let (Kind::Monitor { .. }, Some(last)) = (&o.kind, &o.last) {
                let value = last.with_severity(Severity::Invalid);
                let pv = o.pv.clone();
                self.events.push(ClientEvent::Monitor {
                    op,
                    pv,
                    value,
                    at: self.now,
                });
            }
            self.fail(op, ClientError::ConnLost);
        }
    }

    fn ep_of(&self, conn: ConnId) -> Option<usize> {
        self.conns.iter().position(|c| match c {
            ConnState::Connecting { conn: c, .. } | ConnState::Up { conn: c, .. } => *c == conn,
            ConnState::Down => false,
        })
    }

    fn handle(&mut self, ep: usize, msg: Message) {
        match msg {
            Message::SearchOk { cid, .. } | Message::SearchFail { cid, .. } => {
                let found = matches!(msg, Message::SearchOk { .. });
                if let Some((op, e)) = self.searches.remove(&cid) {
                    if e == ep {
                        self.answer(op, ep, found);
                    }
                }
            }
            Message::ChanOk { cid, .. } => {
                let Some(&op) = self.chans.get(&cid) else {
                    return;
                };
                let o = self.ops.get_mut(&op).expect("channel ops are live");
                let Phase::Creating { ep: e, cid: c } = o.phase else {
                    return;
                };
                let msg = match &o.kind {
                    Kind::Get => {
                        o.phase = Phase::Waiting { ep: e, cid: c };
                        Message::Read { cid }
                    }
                    Kind::Put(v) => {
                        o.phase = Phase::Waiting { ep: e, cid: c };
                        Message::Write {
                            cid,
                            value: v.clone(),
                        }
                    }
                    Kind::Monitor { .. } => {
                        o.phase = Phase::Monitoring { ep: e, cid: c };
                        Message::EventAdd { cid }
                    }
                    Kind::Resolve => return,
                };
                self.send(ep, msg);
            }
            Message::ChanFail { cid, status } => {
                if let Some(op) = self.chans.remove(&cid) {
                    let pv = self.ops[&op].pv.clone();
                    let write = matches!(self.ops[&op].kind, Kind::Put(_));
                    self.fail(op, ClientError::from_status(status, &pv, write));
                }
            }
            Message::ReadReply { cid, result } => {
                let Some(&op) = self.chans.get(&cid) else {
                    return;
                };
                let o = &self.ops[&op];
                if !matches!(o.kind, Kind::Get) {
                    return;
                }
                let pv = o.pv.clone();
                match result {
                    Ok(v) => self.finish(op, ep, cid, |pv| ClientEvent::GetDone {
                        op,
                        pv,
                        result: Ok(v),
                    }),
                    Err(s) => {
                        self.send(ep, Message::ClearChan { cid });
                        self.fail(op, ClientError::from_status(s, &pv, false));
                    }
                }
            }
            Message::WriteOk { cid } | Message::WriteDenied { cid, .. } => {
                let Some(&op) = self.chans.get(&cid) else {
                    return;
                };
                if !matches!(self.ops[&op].kind, Kind::Put(_)) {
                    return;
                }
                match msg {
                    Message::WriteOk { .. } => {
                        self.finish(op, ep, cid, |pv| ClientEvent::PutDone {
                            op,
                            pv,
                            result: Ok(()),
                        })
                    }
                    Message::WriteDenied { status, .. } => {
                        let pv = self.ops[&op].pv.clone();
                        self.send(ep, Message::ClearChan { cid });
                        self.fail(op, ClientError::from_status(status, &pv, true));
                    }
                    _ => unreachable!(),
                }
            }
            Message::Event { cid, value } => {
                let Some(&op) = self.chans.get(&cid) else {
                    return;
                };
                let o = self.ops.get_mut(&op).expect("channel ops are live");
                if !matches!(o.phase, Phase::Monitoring { .. }) {
                    return;
                }
                o.last = Some(value.clone());
                let pv = o.pv.clone();
                self.events.push(ClientEvent::Monitor {
                    op,
                    pv,
                    value,
                    at: self.now,
                });
            }
            Message::EventCancel { cid, status } => {
                if let Some(op) = self.chans.remove(&cid) {
                    let pv = self.ops[&op].pv.clone();
                    self.send(ep, Message::ClearChan { cid });
                    self.fail(op, ClientError::from_status(status, &pv, false));
                }
            }
            Message::Echo { cid } => self.send(ep, Message::EchoReply { cid }),
            Message::EchoReply { .. } => {}
            other => log::debug!("ignoring unexpected {:?}", other.command()),
        }
    }

    fn finish(&mut self, op: OpId, ep: usize, cid: u32, event: impl FnOnce(String) -> ClientEvent) {
        self.chans.remove(&cid);
        let o = self.ops.remove(&op).expect("present");
        self.send(ep, Message::ClearChan { cid });
        self.events.push(event(o.pv));
    }
}

impl Node for ClientCore {
    fn on_accept(&mut self, _conn: ConnId, _now: Millis) -> bool {
        false
    }

    fn on_connected(&mut self, conn: ConnId, now: Millis) {
        self.now = now;
        let Some(ep) = self.ep_of(conn) else {
            return;
        };
        let state = std::mem::replace(
            &mut self.conns[ep],
            ConnState::Up {
                conn,
                live: Liveness::new(now),
            },
        );
        if let ConnState::Connecting { queued, .. } = state {
            for msg in queued {
                self.out.send(conn, &msg);
            }
        }
    }

    fn on_connect_failed(&mut self, conn: ConnId, now: Millis) {
        self.now = now;
        if let Some(ep) = self.ep_of(conn) {
            self.conn_lost(ep);
        }
    }

    fn on_frame(&mut self, conn: ConnId, frame: Frame, now: Millis) {
        self.now = now;
        let Some(ep) = self.ep_of(conn) else {
            return;
        };
        if let ConnState::Up { live, .. } = &mut self.conns[ep] {
            live.last_rx = now;
        }
        match Message::from_frame(&frame) {
            Ok(msg) => self.handle(ep, msg),
            Err(e) => {
                log::warn!("bad frame from {}: {e}", self.list.endpoints[ep]);
                self.out.close(conn);
                self.conn_lost(ep);
            }
        }
    }

    fn on_closed(&mut self, conn: ConnId, now: Millis) {
        self.now = now;
        if let Some(ep) = self.ep_of(conn) {
            self.conn_lost(ep);
        }
    }

    fn on_tick(&mut self, now: Millis) {
        self.now = now;
        for ep in 0..self.conns.len() {
            let ConnState::Up { conn, live } = &mut self.conns[ep] else {
                continue;
            };
            let conn = *conn;
            if live.dead(now) {
                log::info!("{} silent, dropping", self.list.endpoints[ep]);
                self.out.close(conn);
                self.conn_lost(ep);
            } else if live.echo_due(now) {
                live.last_echo = now;
                self.out.send(conn, &Message::Echo { cid: 0 });
            }
        }
        let expired: Vec<OpId> = self
            .ops
            .iter()
            .filter(
                |(_, o)| matches!(o.phase, Phase::Resolving { deadline, .. } if deadline <= now),
            )
            .map(|(id, _)| *id)
            .collect();
        for op in expired {
            let pending: Vec<usize> = match &self.ops[&op].phase {
                Phase::Resolving { answers, .. } => (0..answers.len())
                    .filter(|&i| answers[i].is_none())
                    .collect(),
                _ => Vec::new(),
            };
            self.searches.retain(|_, (o, _)| *o != op);
            for ep in pending {
                self.answer(op, ep, false);
            }
        }
        let retry: Vec<OpId> = self
            .ops
            .iter()
            .filter(|(_, o)| matches!(o.phase, Phase::Retry { at } if at <= now))
            .map(|(id, _)| *id)
            .collect();
        for op in retry {
            if let Some(o) = self.ops.get_mut(&op) {
                o.last = None;
            }
            self.begin_resolution(op);
        }
    }

    fn next_deadline(&self) -> Option<Millis> {
        let conns = self.conns.iter().filter_map(|c| match c {
            ConnState::Up { live, .. } => Some(live.next_deadline()),
            _ => None,
        });
        let ops = self.ops.values().filter_map(|o| match o.phase {
            Phase::Resolving { deadline, .. } => Some(deadline),
            Phase::Retry { at } => Some(at),
            _ => None,
        });
        conns.chain(ops).min()
    }

    fn drain_io(&mut self) -> Vec<Io> {
        self.out.drain()
    }
}

impl fmt::Display for AddressList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&join(&self.endpoints))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decide_ordered() {
        assert_eq!(decide(&[None, Some(true)], false), Decision::Pending);
        assert_eq!(
            decide(&[Some(false), Some(true)], false),
            Decision::Found(1)
        );
        assert_eq!(decide(&[Some(true), None], false), Decision::Found(0));
        assert_eq!(
            decide(&[Some(false), Some(false)], false),
            Decision::NotFound
        );
    }

    #[test]
    fn decide_strict() {
        assert_eq!(decide(&[Some(true), None], true), Decision::Pending);
        assert_eq!(
            decide(&[Some(true), Some(true)], true),
            Decision::Duplicate(vec![0, 1])
        );
        assert_eq!(decide(&[Some(false), Some(true)], true), Decision::Found(1));
        assert_eq!(decide(&[Some(false)], true), Decision::NotFound);
    }

    #[test]
    fn address_list_rules() {
        assert!("".parse::<AddressList>().is_err());
        assert!("a:1,a:1".parse::<AddressList>().is_err());
        assert!("a:1,b".parse::<AddressList>().is_err());
        let l: AddressList = "a:1, b:2".parse().unwrap();
        assert_eq!(l.endpoints().len(), 2);
        assert_eq!(l.to_string(), "a:1, b:2");
    }

    #[test]
    fn search_goes_to_every_endpoint() {
        let list: AddressList = "a:1,b:2".parse().unwrap();
        let mut c = ClientCore::new(list, Identity::new("u", "h"), 0);
        c.resolve("pv", 0);
        let io = c.drain_io();
        let connects = io.iter().filter(|i| matches!(i, Io::Connect(..))).count();
        assert_eq!(connects, 2);
    }

    #[test]
    fn unreachable_endpoints_resolve_not_found() {
        let list: AddressList = "a:1".parse().unwrap();
        let mut c = ClientCore::new(list, Identity::new("u", "h"), 0);
        let op = c.get("pv", 0);
        c.drain_io();
        c.on_connect_failed(ConnId::outbound(1), 5);
        assert_eq!(
            c.take_events(),
            vec![ClientEvent::GetDone {
                op,
                pv: "pv".into(),
                result: Err(ClientError::NotFound("pv".into()))
            }]
        );
    }

    #[test]
    fn exit_codes() {
        assert_eq!(ClientError::NotFound("x".into()).exit_code(), 2);
        assert_eq!(ClientError::WriteDenied.exit_code(), 3);
        assert_eq!(
            ClientError::DuplicatePv {
                pv: "x".into(),
                endpoints: vec![]
            }
            .exit_code(),
            4
        );
    }
}
