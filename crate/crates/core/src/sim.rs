//! Deterministic discrete-event network in virtual time.
//!
//! Links have zero latency and deliver in FIFO order. The clock only jumps
//! to the earliest deadline any live node reports, so a run is a pure
//! function of its inputs. Killing a node silences it: peers get no close
//! notification and must notice through heartbeats, as with a crashed host.

use std::collections::{HashMap, VecDeque};

use crate::client::{ClientCore, ClientEvent};
use crate::gateway::Gateway;
use crate::iocsim::IocServer;
use crate::node::{ConnId, Endpoint, Io, Millis, Node};
use crate::proto::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

// few actors per net; boxing the IOC buys nothing
#[allow(clippy::large_enum_variant)]
#[derive(Debug)]
pub enum Actor {
    Ioc(IocServer),
    Gateway(Box<Gateway>),
    Client(ClientCore),
}

impl Actor {
    fn node(&mut self) -> &mut dyn Node {
        match self {
            Actor::Ioc(n) => n,
            Actor::Gateway(n) => n.as_mut(),
            Actor::Client(n) => n,
        }
    }

    fn node_ref(&self) -> &dyn Node {
        match self {
            Actor::Ioc(n) => n,
            Actor::Gateway(n) => n.as_ref(),
            Actor::Client(n) => n,
        }
    }
}

impl From<IocServer> for Actor {
    fn from(n: IocServer) -> Self {
        Actor::Ioc(n)
    }
}

impl From<Gateway> for Actor {
    fn from(n: Gateway) -> Self {
        Actor::Gateway(Box::new(n))
    }
}

impl From<ClientCore> for Actor {
    fn from(n: ClientCore) -> Self {
        Actor::Client(n)
    }
}

/// One frame observed on a link.
#[derive(Debug, Clone, PartialEq)]
pub struct Captured {
    pub at: Millis,
    pub from: NodeId,
    pub to: NodeId,
    pub frame: Frame,
}

#[derive(Debug)]
struct Slot {
    name: String,
    actor: Actor,
    endpoint: Option<Endpoint>,
    alive: bool,
    next_inbound: u64,
}

#[derive(Debug)]
enum Delivery {
    Frame {
        to: NodeId,
        conn: ConnId,
        frame: Frame,
    },
    Connected {
        to: NodeId,
        conn: ConnId,
    },
    ConnectFailed {
        to: NodeId,
        conn: ConnId,
    },
    Closed {
        to: NodeId,
        conn: ConnId,
    },
}

#[derive(Debug, Default)]
pub struct SimNet {
    now: Millis,
    slots: Vec<Slot>,
    listeners: HashMap<Endpoint, NodeId>,
    routes: HashMap<(NodeId, ConnId), (NodeId, ConnId)>,
    queue: VecDeque<Delivery>,
    capture: Option<Vec<Captured>>,
    delivered: u64,
}

impl SimNet {
    pub fn new() -> Self {
        SimNet::default()
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    /// Frames delivered since creation.
    pub fn frames_delivered(&self) -> u64 {
        self.delivered
    }

    /// Adds a node; servers pass the endpoint they listen on.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        actor: impl Into<Actor>,
        endpoint: Option<Endpoint>,
    ) -> NodeId {
        let id = NodeId(self.slots.len());
        if let Some(ep) = &endpoint {
            let prev = self.listeners.insert(ep.clone(), id);
            assert!(prev.is_none(), "endpoint {ep} already in use");
        }
        self.slots.push(Slot {
            name: name.into(),
            actor: actor.into(),
            endpoint,
            alive: true,
            next_inbound: 1,
        });
        self.flush(id);
        id
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.slots[id.0].name
    }

    pub fn endpoint(&self, id: NodeId) -> Option<&Endpoint> {
        self.slots[id.0].endpoint.as_ref()
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.slots[id.0].alive
    }

    pub fn actor(&self, id: NodeId) -> &Actor {
        &self.slots[id.0].actor
    }

    pub fn ioc(&self, id: NodeId) -> &IocServer {
        match &self.slots[id.0].actor {
            Actor::Ioc(n) => n,
            other => panic!("{id:?} is not an IOC: {other:?}"),
        }
    }

    pub fn gateway(&self, id: NodeId) -> &Gateway {
        match &self.slots[id.0].actor {
            Actor::Gateway(n) => n,
            other => panic!("{id:?} is not a gateway: {other:?}"),
        }
    }

    pub fn client(&self, id: NodeId) -> &ClientCore {
        match &self.slots[id.0].actor {
            Actor::Client(n) => n,
            other => panic!("{id:?} is not a client: {other:?}"),
        }
    }

    /// Runs `f` against a client and processes its output.
    pub fn with_client<R>(
        &mut self,
        id: NodeId,
        f: impl FnOnce(&mut ClientCore, Millis) -> R,
    ) -> R {
        let now = self.now;
        let r = match &mut self.slots[id.0].actor {
            Actor::Client(n) => f(n, now),
            other => panic!("{id:?} is not a client: {other:?}"),
        };
        self.flush(id);
        self.deliver_all();
        r
    }

    pub fn client_events(&mut self, id: NodeId) -> Vec<ClientEvent> {
        match &mut self.slots[id.0].actor {
            Actor::Client(n) => n.take_events(),
            other => panic!("{id:?} is not a client: {other:?}"),
        }
    }

    pub fn with_gateway<R>(&mut self, id: NodeId, f: impl FnOnce(&mut Gateway, Millis) -> R) -> R {
        let now = self.now;
        let r = match &mut self.slots[id.0].actor {
            Actor::Gateway(n) => f(n, now),
            other => panic!("{id:?} is not a gateway: {other:?}"),
        };
        self.flush(id);
        self.deliver_all();
        r
    }

    /// Crashes a node. Its connections vanish without notice to peers and
    /// frames addressed to it are dropped.
    pub fn kill(&mut self, id: NodeId) {
        self.slots[id.0].alive = false;
        self.routes.retain(|(a, _), (b, _)| *a != id && *b != id);
        self.queue.retain(|d| match d {
            Delivery::Frame { to, .. }
            | Delivery::Connected { to, .. }
            | Delivery::ConnectFailed { to, .. }
            | Delivery::Closed { to, .. } => *to != id,
        });
    }

    /// Brings a killed node back as a fresh instance.
    pub fn restart(&mut self, id: NodeId, actor: impl Into<Actor>) {
        let slot = &mut self.slots[id.0];
        slot.actor = actor.into();
        slot.alive = true;
        self.flush(id);
        self.deliver_all();
    }

    pub fn start_capture(&mut self) {
        self.capture = Some(Vec::new());
    }

    /// Stops capturing and returns what was seen.
    pub fn take_capture(&mut self) -> Vec<Captured> {
        self.capture.take().unwrap_or_default()
    }

    pub fn captured(&self) -> &[Captured] {
        self.capture.as_deref().unwrap_or(&[])
    }

    fn flush(&mut self, id: NodeId) {
        if !self.slots[id.0].alive {
            return;
        }
        let io = self.slots[id.0].actor.node().drain_io();
        for req in io {
            match req {
                Io::Send(conn, frame) => {
                    let Some(&(peer, peer_conn)) = self.routes.get(&(id, conn)) else {
                        continue;
                    };
                    if let Some(cap) = &mut self.capture {
                        cap.push(Captured {
                            at: self.now,
                            from: id,
                            to: peer,
                            frame: frame.clone(),
                        });
                    }
                    self.queue.push_back(Delivery::Frame {
                        to: peer,
                        conn: peer_conn,
                        frame,
                    });
                }
                Io::Connect(conn, endpoint) => self.connect(id, conn, &endpoint),
                Io::Close(conn) => {
                    if let Some((peer, peer_conn)) = self.routes.remove(&(id, conn)) {
                        self.routes.remove(&(peer, peer_conn));
                        self.queue.push_back(Delivery::Closed {
                            to: peer,
                            conn: peer_conn,
                        });
                    }
                }
            }
        }
    }

    fn connect(&mut self, from: NodeId, conn: ConnId, endpoint: &Endpoint) {
        let server = self
            .listeners
            .get(endpoint)
            .copied()
            .filter(|s| self.slots[s.0].alive);
        let Some(server) = server else {
            self.queue
                .push_back(Delivery::ConnectFailed { to: from, conn });
            return;
        };
        let slot = &mut self.slots[server.0];
        let inbound = ConnId(slot.next_inbound);
        slot.next_inbound += 1;
        let accepted = slot.actor.node().on_accept(inbound, self.now);
        if accepted {
            self.routes.insert((from, conn), (server, inbound));
            self.routes.insert((server, inbound), (from, conn));
            self.queue.push_back(Delivery::Connected { to: from, conn });
        } else {
            self.queue
                .push_back(Delivery::ConnectFailed { to: from, conn });
        }
        self.flush(server);
    }

    fn deliver_all(&mut self) {
        while let Some(d) = self.queue.pop_front() {
            let now = self.now;
            let to = match d {
                Delivery::Frame { to, conn, frame } => {
                    if !self.routes.contains_key(&(to, conn)) {
                        continue;
                    }
                    self.delivered += 1;
                    self.slots[to.0].actor.node().on_frame(conn, frame, now);
                    to
                }
                Delivery::Connected { to, conn } => {
                    self.slots[to.0].actor.node().on_connected(conn, now);
                    to
                }
                Delivery::ConnectFailed { to, conn } => {
                    self.slots[to.0].actor.node().on_connect_failed(conn, now);
                    to
                }
                Delivery::Closed { to, conn } => {
                    self.slots[to.0].actor.node().on_closed(conn, now);
                    to
                }
            };
            self.flush(to);
        }
    }

    fn earliest_deadline(&self) -> Option<Millis> {
        self.slots
            .iter()
            .filter(|s| s.alive)
            .filter_map(|s| s.actor.node_ref().next_deadline())
            .min()
    }

    /// Advances virtual time to `t`, firing every deadline on the way.
    pub fn run_until(&mut self, t: Millis) {
        self.deliver_all();
        loop {
            let next = match self.earliest_deadline() {
                Some(d) => d.max(self.now + 1),
                None => Millis::MAX,
            };
            if next > t {
                self.now = self.now.max(t);
                return;
            }
            self.now = next;
            for i in 0..self.slots.len() {
                let due = {
                    let s = &self.slots[i];
                    s.alive
                        && s.actor
                            .node_ref()
                            .next_deadline()
                            .is_some_and(|d| d <= next)
                };
                if due {
                    self.slots[i].actor.node().on_tick(next);
                    self.flush(NodeId(i));
                    self.deliver_all();
                }
            }
        }
    }

    pub fn run_for(&mut self, ms: Millis) {
        self.run_until(self.now + ms);
    }
}
