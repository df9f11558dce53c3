//! Runs [`Node`]s on real sockets with tokio.
//!
//! The node sits behind a mutex. Socket tasks lock it only to feed one event
//! and collect its output, which is pushed to per-connection writer queues
//! without awaiting, so no lock is ever held across an await point.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use crate::acf::AccessSecurityConfig;
use crate::client::{AddressList, ClientCore, ClientError, ClientEvent, OpId};
use crate::gateway::{Gateway, GatewayConfig, GatewayError, GatewayStats};
use crate::iocsim::{IocConfig, IocError, IocServer, IocStats, PvRecord};
use crate::node::{ConnId, Endpoint, Io, Millis, Node};
use crate::proto::{encode_frame, ChannelValue, FrameDecoder, Identity};

const TICK: Duration = Duration::from_millis(5);

struct Shared<N> {
    node: Mutex<N>,
    writers: Mutex<HashMap<ConnId, mpsc::UnboundedSender<Vec<u8>>>>,
    readers: Mutex<HashMap<ConnId, JoinHandle<()>>>,
    start: Instant,
    next_inbound: Mutex<u64>,
}

/// A node running on the tokio runtime. Dropping the handle stops it.
pub struct NodeHandle<N: Node + Send + 'static> {
    shared: Arc<Shared<N>>,
    tasks: Vec<JoinHandle<()>>,
    local_addr: Option<std::net::SocketAddr>,
}

impl<N: Node + Send + 'static> NodeHandle<N> {
    /// Starts `node`, accepting connections on `listener` if given.
    pub fn spawn(node: N, listener: Option<TcpListener>) -> Self {
        let shared = Arc::new(Shared {
            node: Mutex::new(node),
            writers: Mutex::new(HashMap::new()),
            readers: Mutex::new(HashMap::new()),
            start: Instant::now(),
            next_inbound: Mutex::new(1),
        });
        let mut tasks = Vec::new();
        let local_addr = listener.as_ref().and_then(|l| l.local_addr().ok());
        if let Some(listener) = listener {
            tasks.push(tokio::spawn(accept_loop(shared.clone(), listener)));
        }
        tasks.push(tokio::spawn(tick_loop(shared.clone())));
        NodeHandle {
            shared,
            tasks,
            local_addr,
        }
    }

    pub fn local_addr(&self) -> Option<std::net::SocketAddr> {
        self.local_addr
    }

    /// Milliseconds since the node started.
    pub fn now(&self) -> Millis {
        self.shared.start.elapsed().as_millis() as Millis
    }

    /// Runs `f` against the node, then sends whatever it queued.
    pub fn with<R>(&self, f: impl FnOnce(&mut N, Millis) -> R) -> R {
        let now = self.now();
        let (r, io) = {
            let mut node = self.shared.node.lock();
            let r = f(&mut node, now);
            (r, node.drain_io())
        };
        dispatch(&self.shared, io);
        r
    }

    pub fn shutdown(self) {}
}

impl<N: Node + Send + 'static> Drop for NodeHandle<N> {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
        for (_, t) in self.shared.readers.lock().drain() {
            t.abort();
        }
        self.shared.writers.lock().clear();
    }
}

fn now_of<N>(shared: &Shared<N>) -> Millis {
    shared.start.elapsed().as_millis() as Millis
}

fn step<N: Node + Send + 'static>(shared: &Arc<Shared<N>>, f: impl FnOnce(&mut N, Millis)) {
    let now = now_of(shared);
    let io = {
        let mut node = shared.node.lock();
        f(&mut node, now);
        node.drain_io()
    };
    dispatch(shared, io);
}

fn dispatch<N: Node + Send + 'static>(shared: &Arc<Shared<N>>, io: Vec<Io>) {
    for req in io {
        match req {
            Io::Send(conn, frame) => match encode_frame(&frame) {
                Ok(bytes) => {
                    if let Some(tx) = shared.writers.lock().get(&conn) {
                        let _ = tx.send(bytes);
                    }
                }
                Err(e) => log::error!("dropping unencodable frame: {e}"),
            },
            Io::Close(conn) => {
                shared.writers.lock().remove(&conn);
                if let Some(t) = shared.readers.lock().remove(&conn) {
                    t.abort();
                }
            }
            Io::Connect(conn, endpoint) => {
                tokio::spawn(connect(shared.clone(), conn, endpoint));
            }
        }
    }
}

async fn connect<N: Node + Send + 'static>(
    shared: Arc<Shared<N>>,
    conn: ConnId,
    endpoint: Endpoint,
) {
    match TcpStream::connect(endpoint.as_str()).await {
        Ok(stream) => {
            let _ = stream.set_nodelay(true);
            attach(&shared, conn, stream);
            step(&shared, |n, now| n.on_connected(conn, now));
        }
        Err(e) => {
            log::debug!("connect {endpoint}: {e}");
            step(&shared, |n, now| n.on_connect_failed(conn, now));
        }
    }
}

fn attach<N: Node + Send + 'static>(shared: &Arc<Shared<N>>, conn: ConnId, stream: TcpStream) {
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Vec<u8>>();
    shared.writers.lock().insert(conn, tx);
    tokio::spawn(async move {
        while let Some(bytes) = rx.recv().await {
            if wr.write_all(&bytes).await.is_err() {
                break;
            }
        }
        let _ = wr.shutdown().await;
    });
    let sh = shared.clone();
    let reader = tokio::spawn(async move {
        let mut decoder = FrameDecoder::new();
        let mut buf = vec![0u8; 16 * 1024];
        loop {
            let n = match rd.read(&mut buf).await {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            decoder.extend(&buf[..n]);
            loop {
                match decoder.next_frame() {
                    Ok(Some(frame)) => step(&sh, |node, now| node.on_frame(conn, frame, now)),
                    Ok(None) => break,
                    Err(e) => {
                        log::debug!("{conn}: {e}, dropping connection");
                        finish(&sh, conn);
                        return;
                    }
                }
            }
        }
        finish(&sh, conn);
    });
    shared.readers.lock().insert(conn, reader);
}

/// Transport-side close: tells the node unless it closed the connection.
fn finish<N: Node + Send + 'static>(shared: &Arc<Shared<N>>, conn: ConnId) {
    let ours = shared.writers.lock().remove(&conn).is_some();
    shared.readers.lock().remove(&conn);
    if ours {
        step(shared, |n, now| n.on_closed(conn, now));
    }
}

async fn accept_loop<N: Node + Send + 'static>(shared: Arc<Shared<N>>, listener: TcpListener) {
    loop {
        let (stream, peer) = match listener.accept().await {
            Ok(x) => x,
            Err(e) => {
                log::warn!("accept: {e}");
                tokio::time::sleep(Duration::from_millis(50)).await;
                continue;
            }
        };
        let conn = {
            let mut n = shared.next_inbound.lock();
            let c = ConnId(*n);
            *n += 1;
            c
        };
        let _ = stream.set_nodelay(true);
        let now = now_of(&shared);
        let accepted = shared.node.lock().on_accept(conn, now);
        if accepted {
            log::debug!("{conn} accepted from {peer}");
            attach(&shared, conn, stream);
        } else {
            log::debug!("refused {peer}");
            drop(stream);
        }
        let io = shared.node.lock().drain_io();
        dispatch(&shared, io);
    }
}

async fn tick_loop<N: Node + Send + 'static>(shared: Arc<Shared<N>>) {
    let mut interval = tokio::time::interval(TICK);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        interval.tick().await;
        let now = now_of(&shared);
        let due = shared.node.lock().next_deadline().is_some_and(|d| d <= now);
        if due {
            step(&shared, |n, now| n.on_tick(now));
        }
    }
}

async fn bind(endpoint: &Endpoint) -> std::io::Result<TcpListener> {
    TcpListener::bind(endpoint.as_str()).await
}

/// Starts an IOC listening on `listen`. Timestamps are `cfg.epoch_ns` plus
/// time since start; pass [`wall_clock_ns`] for wall-clock stamps.
pub async fn run_ioc(
    records: Vec<PvRecord>,
    acf: AccessSecurityConfig,
    listen: &Endpoint,
    cfg: IocConfig,
) -> Result<NodeHandle<IocServer>, IocError> {
    let listener = bind(listen)
        .await
        .map_err(|e| IocError::BindFailed(format!("{listen}: {e}")))?;
    let server = IocServer::new(records, acf, cfg, 0);
    Ok(NodeHandle::spawn(server, Some(listener)))
}

pub fn ioc_stats(handle: &NodeHandle<IocServer>) -> IocStats {
    handle.with(|ioc, now| ioc.stats(now))
}

pub fn wall_clock_ns() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

pub async fn start_gateway(cfg: &GatewayConfig) -> Result<NodeHandle<Gateway>, GatewayError> {
    cfg.validate()?;
    let acf = cfg.load_acf()?;
    let listener = bind(&cfg.listen)
        .await
        .map_err(|e| GatewayError::BindFailed(format!("{}: {e}", cfg.listen)))?;
    let gw = Gateway::new(cfg, acf, 0);
    Ok(NodeHandle::spawn(gw, Some(listener)))
}

pub fn gateway_stats(handle: &NodeHandle<Gateway>) -> GatewayStats {
    handle.with(|gw, now| gw.stats(now))
}

/// Async client over TCP.
pub struct Client {
    handle: NodeHandle<ClientCore>,
}

impl Client {
    pub fn new(list: AddressList, identity: Identity) -> Self {
        Client {
            handle: NodeHandle::spawn(ClientCore::new(list, identity, 0), None),
        }
    }

    async fn wait_for(&self, op: OpId, timeout: Duration) -> Result<ClientEvent, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            let found = self.handle.with(|c, _| c.take_event_for(op));
            if let Some(e) = found {
                return Ok(e);
            }
            if Instant::now() >= deadline {
                self.handle.with(|c, now| c.cancel(op, now));
                return Err(ClientError::Timeout);
            }
            tokio::time::sleep(Duration::from_millis(2)).await;
        }
    }

    pub async fn resolve(&self, pv: &str, timeout: Duration) -> Result<Endpoint, ClientError> {
        let op = self.handle.with(|c, now| c.resolve(pv, now));
        match self.wait_for(op, timeout).await? {
            ClientEvent::Resolved { result, .. } => result,
            other => unreachable!("{other:?}"),
        }
    }

    pub async fn get(&self, pv: &str, timeout: Duration) -> Result<ChannelValue, ClientError> {
        let op = self.handle.with(|c, now| c.get(pv, now));
        match self.wait_for(op, timeout).await? {
            ClientEvent::GetDone { result, .. } => result,
            other => unreachable!("{other:?}"),
        }
    }

    pub async fn put(
        &self,
        pv: &str,
        value: ChannelValue,
        timeout: Duration,
    ) -> Result<(), ClientError> {
        let op = self.handle.with(|c, now| c.put(pv, value, now));
        match self.wait_for(op, timeout).await? {
            ClientEvent::PutDone { result, .. } => result,
            other => unreachable!("{other:?}"),
        }
    }

    /// Calls `sink` for each monitor update until it returns `false`, the
    /// monitor ends, or `timeout` passes without an update.
    pub async fn monitor(
        &self,
        pv: &str,
        timeout: Duration,
        mut sink: impl FnMut(&ChannelValue) -> bool,
    ) -> Result<(), ClientError> {
        let op = self.handle.with(|c, now| c.monitor(pv, now));
        loop {
            match self.wait_for(op, timeout).await? {
                ClientEvent::Monitor { value, .. } => {
                    if !sink(&value) {
                        self.handle.with(|c, now| c.cancel(op, now));
                        return Ok(());
                    }
                }
                ClientEvent::MonitorEnded { error, .. } => return Err(error),
                other => unreachable!("{other:?}"),
            }
        }
    }
}
