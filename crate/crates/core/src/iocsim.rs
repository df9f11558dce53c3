//! Simulated IOC: a database of generated process variables served over the
//! wire protocol, with a fixed file-descriptor model and a linear CPU proxy
//! so that saturation is observable.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acf::{AccessSecurityConfig, Level, DEFAULT_ASG};
use crate::node::{ConnId, Io, Liveness, Millis, Node, Outbox};
use crate::proto::{
    Access, ChannelValue, DType, Frame, Identity, Message, Severity, Status, Value,
};
use crate::rate::RateWindow;

pub const DEFAULT_FD_LIMIT: usize = 150;
/// Listener plus the stdio triple.
pub const BASE_FDS: usize = 4;
pub const MAX_PV_NAME: usize = 60;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IocError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate pv {0}")]
    DuplicatePv(String),
    #[error("bind failed: {0}")]
    BindFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Generator {
    Const,
    Counter,
    Sine,
    RandomWalk,
}

impl std::str::FromStr for Generator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "CONST" => Ok(Generator::Const),
            "COUNTER" => Ok(Generator::Counter),
            "SINE" => Ok(Generator::Sine),
            "RANDOM_WALK" => Ok(Generator::RandomWalk),
            _ => Err(format!("unknown generator {s:?}")),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generator::Const => "CONST",
            Generator::Counter => "COUNTER",
            Generator::Sine => "SINE",
            Generator::RandomWalk => "RANDOM_WALK",
        })
    }
}

#[derive(Debug, Clone)]
pub struct PvRecord {
    pub name: String,
    pub dtype: DType,
    pub asg: String,
    pub generator: Generator,
    pub period_ms: u64,
    pub amplitude: f64,
    pub current: ChannelValue,
    rng: ChaCha8Rng,
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl PvRecord {
    pub fn new(
        name: impl Into<String>,
        dtype: DType,
        asg: impl Into<String>,
        generator: Generator,
        period_ms: u64,
        amplitude: f64,
    ) -> Self {
        let name = name.into();
        let rng = ChaCha8Rng::seed_from_u64(name_hash(&name));
        let mut rec = PvRecord {
            name,
            dtype,
            asg: asg.into(),
            generator,
            period_ms: period_ms.max(1),
            amplitude,
            current: ChannelValue::new(Value::Double(0.0), Severity::None, 0),
            rng,
        };
        rec.current = rec.initial_value();
        rec
    }

    /// Mixes an extra seed into the random-walk generator.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(name_hash(&self.name) ^ seed);
        self.current = self.initial_value();
    }

    fn initial_value(&mut self) -> ChannelValue {
        let raw = match self.generator {
            Generator::RandomWalk => 0.0,
            _ => self.raw_at(0),
        };
        self.make_value(raw, 0)
    }

    fn raw_at(&self, t_ms: u64) -> f64 {
        match self.generator {
            Generator::Const => self.amplitude,
            Generator::Counter => ((t_ms / self.period_ms) % (1u64 << 31)) as f64,
            Generator::Sine => {
                self.amplitude * (2.0 * PI * t_ms as f64 / (1000.0 * self.period_ms as f64)).sin()
            }
            Generator::RandomWalk => self.current.value.as_f64().unwrap_or(0.0),
        }
    }

    fn make_value(&self, raw: f64, timestamp: u64) -> ChannelValue {
        let severity = if self.amplitude > 0.0 && raw.abs() > 10.0 * self.amplitude {
            Severity::Major
        } else {
            Severity::None
        };
        let value = Value::Double(raw)
            .coerce(self.dtype)
            .expect("numeric values coerce to every dtype");
        ChannelValue::new(value, severity, timestamp)
    }

    /// Advances the generator to `t_ms`, stores and returns the new value.
    /// The timestamp is `epoch_ns + t_ms` expressed in nanoseconds.
    pub fn step(&mut self, t_ms: u64, epoch_ns: u64) -> ChannelValue {
        let raw = match self.generator {
            Generator::RandomWalk => {
                let prev = self.current.value.as_f64().unwrap_or(0.0);
                let delta = if self.amplitude > 0.0 {
                    self.rng.random_range(-self.amplitude..=self.amplitude)
                } else {
                    0.0
                };
                prev + delta
            }
            _ => self.raw_at(t_ms),
        };
        let v = self.make_value(raw, epoch_ns.saturating_add(t_ms.saturating_mul(1_000_000)));
        self.current = v.clone();
        v
    }

    fn ticks(&self) -> bool {
        self.generator != Generator::Const
    }
}

/// Generator value at `t_ms` on a clock whose epoch is the Unix epoch.
pub fn generator_step(rec: &mut PvRecord, t_ms: u64) -> ChannelValue {
    rec.step(t_ms, 0)
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= MAX_PV_NAME
        && !name.contains('.')
        && !name.chars().any(char::is_whitespace)
}

/// Parses `pv <name> <dtype> <asg> <generator> <period_ms> <amplitude>` lines.
pub fn load_database(text: &str) -> Result<Vec<PvRecord>, IocError> {
    let mut out: Vec<PvRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or_default().trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| IocError::Parse { line, message };
        let fields: Vec<&str> = content.split_whitespace().collect();
        let [kw, name, dtype, asg, generator, period, amplitude] = fields[..] else {
            return Err(err(format!("expected 7 fields, found {}", fields.len())));
        };
        if kw != "pv" {
            return Err(err(format!("expected 'pv', found {kw:?}")));
        }
        if !valid_name(name) {
            return Err(err(format!("invalid pv name {name:?}")));
        }
        let dtype: DType = dtype.parse().map_err(err)?;
        let generator: Generator = generator.parse().map_err(err)?;
        let period_ms: u64 = period
            .parse()
            .map_err(|_| err(format!("bad period {period:?}")))?;
        if period_ms < 1 {
            return Err(err("period_ms must be at least 1".into()));
        }
        let amplitude: f64 = amplitude
            .parse()
            .map_err(|_| err(format!("bad amplitude {amplitude:?}")))?;
        if !seen.insert(name.to_string()) {
            return Err(IocError::DuplicatePv(name.to_string()));
        }
        out.push(PvRecord::new(
            name, dtype, asg, generator, period_ms, amplitude,
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IocStats {
    pub connections: usize,
    pub fds: usize,
    pub event_posts_per_sec: f64,
    pub msgs_in_per_sec: f64,
    pub msgs_out_per_sec: f64,
    pub cpu_proxy: f64,
    pub refused_connections: u64,
}

#[derive(Debug, Clone)]
pub struct IocConfig {
    pub name: String,
    /// Messages per second (in + out) that saturate the CPU proxy.
    pub capacity: f64,
    pub fd_limit: usize,
    /// Nanoseconds added to generator timestamps; zero in virtual time.
    pub epoch_ns: u64,
    pub seed: u64,
    pub window_secs: u64,
}

impl Default for IocConfig {
    fn default() -> Self {
        IocConfig {
            name: "ioc".into(),
            capacity: 10_000.0,
            fd_limit: DEFAULT_FD_LIMIT,
            epoch_ns: 0,
            seed: 0,
            window_secs: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StatPv {
    Fds,
    Connections,
    CpuProxy,
    EventPosts,
    MsgsIn,
    Refused,
}

impl StatPv {
    const ALL: [(StatPv, &'static str); 6] = [
        (StatPv::Fds, "fds"),
        (StatPv::Connections, "connections"),
        (StatPv::CpuProxy, "cpu_proxy"),
        (StatPv::EventPosts, "event_posts_per_sec"),
        (StatPv::MsgsIn, "msgs_in_per_sec"),
        (StatPv::Refused, "refused_connections"),
    ];

    fn pick(self, s: &IocStats) -> f64 {
        match self {
            StatPv::Fds => s.fds as f64,
            StatPv::Connections => s.connections as f64,
            StatPv::CpuProxy => s.cpu_proxy,
            StatPv::EventPosts => s.event_posts_per_sec,
            StatPv::MsgsIn => s.msgs_in_per_sec,
            StatPv::Refused => s.refused_connections as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Record(usize),
    Stat(StatPv),
}

#[derive(Debug)]
struct Chan {
    target: Target,
    identity: Identity,
    subscribed: bool,
}

#[derive(Debug)]
struct IocConn {
    channels: HashMap<u32, Chan>,
    live: Liveness,
}

#[derive(Debug)]
pub struct IocServer {
    cfg: IocConfig,
    records: Vec<PvRecord>,
    index: HashMap<String, usize>,
    stat_names: HashMap<String, StatPv>,
    acf: AccessSecurityConfig,
    due: BinaryHeap<Reverse<(Millis, usize)>>,
    conns: BTreeMap<ConnId, IocConn>,
    subscribers: Vec<BTreeSet<(ConnId, u32)>>,
    backlog: VecDeque<(ConnId, Frame)>,
    refused: u64,
    msgs_in: RateWindow,
    msgs_out: RateWindow,
    event_posts: RateWindow,
    out: Outbox,
    now: Millis,
}

impl IocServer {
    pub fn new(
        mut records: Vec<PvRecord>,
        acf: AccessSecurityConfig,
        cfg: IocConfig,
        now: Millis,
    ) -> Self {
        if cfg.seed != 0 {
            records.iter_mut().for_each(|r| r.reseed(cfg.seed));
        }
        for r in &mut records {
            r.current.timestamp += cfg.epoch_ns + now * 1_000_000;
        }
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.name.clone(), i))
            .collect();
        let stat_names = StatPv::ALL
            .iter()
            .map(|(s, suffix)| (format!("{}:stats:{suffix}", cfg.name), *s))
            .collect();
        let due = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.ticks())
            .map(|(i, r)| Reverse((now + r.period_ms, i)))
            .collect();
        let n = records.len();
        IocServer {
            msgs_in: RateWindow::new(cfg.window_secs, now),
            msgs_out: RateWindow::new(cfg.window_secs, now),
            event_posts: RateWindow::new(cfg.window_secs, now),
            cfg,
            records,
            index,
            stat_names,
            acf,
            due,
            conns: BTreeMap::new(),
            subscribers: vec![BTreeSet::new(); n],
            backlog: VecDeque::new(),
            refused: 0,
            out: Outbox::default(),
            now,
        }
    }

    pub fn name(&self) -> &str {
        &self.cfg.name
    }

    pub fn records(&self) -> &[PvRecord] {
        &self.records
    }

    pub fn record(&self, name: &str) -> Option<&PvRecord> {
        self.index.get(name).map(|&i| &self.records[i])
    }

    pub fn connections(&self) -> usize {
        self.conns.len()
    }

    /// Total live subscriptions across all connections.
    pub fn subscription_count(&self) -> usize {
        self.subscribers.iter().map(BTreeSet::len).sum()
    }

    pub fn stats(&self, now: Millis) -> IocStats {
        let msgs_in = self.msgs_in.rate(now);
        let msgs_out = self.msgs_out.rate(now);
        IocStats {
            connections: self.conns.len(),
            fds: BASE_FDS + self.conns.len(),
            event_posts_per_sec: self.event_posts.rate(now),
            msgs_in_per_sec: msgs_in,
            msgs_out_per_sec: msgs_out,
            cpu_proxy: cpu_proxy(msgs_in + msgs_out, self.cfg.capacity),
            refused_connections: self.refused,
        }
    }

    fn saturated(&self, now: Millis) -> bool {
        self.stats(now).cpu_proxy >= 1.0
    }

    fn send(&mut self, conn: ConnId, msg: &Message) {
        self.msgs_out.record(self.now, 1);
        self.out.send(conn, msg);
    }

    fn post(&mut self, rec: usize, value: &ChannelValue) {
        let subs: Vec<(ConnId, u32)> = self.subscribers[rec].iter().copied().collect();
        self.event_posts.record(self.now, subs.len() as u64);
        for (conn, cid) in subs {
            self.send(
                conn,
                &Message::Event {
                    cid,
                    value: value.clone(),
                },
            );
        }
    }

    fn drop_conn(&mut self, conn: ConnId) {
        if let Some(c) = self.conns.remove(&conn) {
            for (cid, ch) in c.channels {
                if let Target::Record(r) = ch.target {
                    self.subscribers[r].remove(&(conn, cid));
                }
            }
        }
        self.backlog.retain(|(c, _)| *c != conn);
    }

    fn access(&self, target: Target, who: &Identity) -> Access {
        match target {
            Target::Stat(_) => Access {
                read: true,
                write: false,
            },
            Target::Record(r) => {
                let asg = &self.records[r].asg;
                Access {
                    read: self.acf.allows(asg, who, Level::Read),
                    write: self.acf.allows(asg, who, Level::Write),
                }
            }
        }
    }

    fn lookup(&self, name: &str) -> Option<Target> {
        self.index
            .get(name)
            .map(|&i| Target::Record(i))
            .or_else(|| self.stat_names.get(name).map(|&s| Target::Stat(s)))
    }

    fn current(&self, target: Target) -> ChannelValue {
        match target {
            Target::Record(r) => self.records[r].current.clone(),
            Target::Stat(s) => ChannelValue::new(
                Value::Double(s.pick(&self.stats(self.now))),
                Severity::None,
                self.cfg.epoch_ns + self.now * 1_000_000,
            ),
        }
    }

    fn handle(&mut self, conn: ConnId, frame: Frame) {
        let msg = match Message::from_frame(&frame) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("{}: protocol error from {conn}: {e}", self.cfg.name);
                self.drop_conn(conn);
                self.out.close(conn);
                return;
            }
        };
        match msg {
            Message::Search { cid, name } => {
                let reply = if self.lookup(&name).is_some() {
                    Message::SearchOk { cid, name }
                } else {
                    Message::SearchFail { cid, name }
                };
                self.send(conn, &reply);
            }
            Message::CreateChan {
                cid,
                name,
                identity,
            } => {
                self.clear_chan(conn, cid);
                let Some(target) = self.lookup(&name) else {
                    self.send(
                        conn,
                        &Message::ChanFail {
                            cid,
                            status: Status::NotFound,
                        },
                    );
                    return;
                };
                let (dtype, asg) = match target {
                    Target::Record(r) => (self.records[r].dtype, self.records[r].asg.clone()),
                    Target::Stat(_) => (DType::Double, DEFAULT_ASG.to_string()),
                };
                let access = self.access(target, &identity);
                if let Some(c) = self.conns.get_mut(&conn) {
                    c.channels.insert(
                        cid,
                        Chan {
                            target,
                            identity,
                            subscribed: false,
                        },
                    );
                }
                self.send(
                    conn,
                    &Message::ChanOk {
                        cid,
                        dtype,
                        access,
                        asg,
                    },
                );
            }
            Message::Read { cid } => {
                let reply = match self.chan_info(conn, cid) {
                    None => Err(Status::NotFound),
                    Some((target, who)) if self.access(target, &who).read => {
                        Ok(self.current(target))
                    }
                    Some(_) => Err(Status::Denied),
                };
                self.send(conn, &Message::ReadReply { cid, result: reply });
            }
            Message::Write { cid, value } => {
                let status = self.write(conn, cid, value);
                let reply = match status {
                    Status::Ok => Message::WriteOk { cid },
                    status => Message::WriteDenied { cid, status },
                };
                self.send(conn, &reply);
            }
            Message::EventAdd { cid } => match self.chan_info(conn, cid) {
                Some((target, who)) if self.access(target, &who).read => {
                    if let Some(ch) = self
                        .conns
                        .get_mut(&conn)
                        .and_then(|c| c.channels.get_mut(&cid))
                    {
                        ch.subscribed = true;
                    }
                    if let Target::Record(r) = target {
                        self.subscribers[r].insert((conn, cid));
                        self.event_posts.record(self.now, 1);
                    }
                    let value = self.current(target);
                    self.send(conn, &Message::Event { cid, value });
                }
                info => {
                    let status = if info.is_some() {
                        Status::Denied
                    } else {
                        Status::NotFound
                    };
                    self.send(conn, &Message::EventCancel { cid, status });
                }
            },
            Message::EventCancel { cid, .. } => self.unsubscribe(conn, cid),
            Message::ClearChan { cid } => self.clear_chan(conn, cid),
            Message::Echo { cid } => self.send(conn, &Message::EchoReply { cid }),
            Message::EchoReply { .. } => {}
            other => {
                log::debug!(
                    "{}: unexpected {:?} from {conn}, closing",
                    self.cfg.name,
                    other.command()
                );
                self.drop_conn(conn);
                self.out.close(conn);
            }
        }
    }

    fn chan_info(&self, conn: ConnId, cid: u32) -> Option<(Target, Identity)> {
        let ch = self.conns.get(&conn)?.channels.get(&cid)?;
        Some((ch.target, ch.identity.clone()))
    }

    fn write(&mut self, conn: ConnId, cid: u32, value: ChannelValue) -> Status {
        let Some((target, who)) = self.chan_info(conn, cid) else {
            return Status::NotFound;
        };
        let Target::Record(r) = target else {
            return Status::Denied;
        };
        if !self.access(target, &who).write {
            return Status::Denied;
        }
        let rec = &mut self.records[r];
        let Some(v) = value.value.coerce(rec.dtype) else {
            return Status::BadType;
        };
        let stamp = (self.cfg.epoch_ns + self.now * 1_000_000).max(rec.current.timestamp);
        rec.current = ChannelValue::new(v, value.severity, stamp);
        let current = rec.current.clone();
        self.post(r, &current);
        Status::Ok
    }

    fn unsubscribe(&mut self, conn: ConnId, cid: u32) {
        if let Some(ch) = self
            .conns
            .get_mut(&conn)
            .and_then(|c| c.channels.get_mut(&cid))
        {
            ch.subscribed = false;
            if let Target::Record(r) = ch.target {
                self.subscribers[r].remove(&(conn, cid));
            }
        }
    }

    fn clear_chan(&mut self, conn: ConnId, cid: u32) {
        self.unsubscribe(conn, cid);
        if let Some(c) = self.conns.get_mut(&conn) {
            c.channels.remove(&cid);
        }
    }

    fn run_generators(&mut self, now: Millis, posting: bool) {
        while let Some(&Reverse((t, r))) = self.due.peek() {
            if t > now {
                break;
            }
            self.due.pop();
            let rec = &mut self.records[r];
            let value = rec.step(t, self.cfg.epoch_ns);
            let next = t + rec.period_ms;
            self.due.push(Reverse((next, r)));
            if posting {
                self.post(r, &value);
            }
        }
    }
}

pub fn cpu_proxy(msgs_per_sec: f64, capacity: f64) -> f64 {
    if capacity <= 0.0 {
        return 1.0;
    }
    (msgs_per_sec / capacity).min(1.0)
}

impl Node for IocServer {
    fn on_accept(&mut self, conn: ConnId, now: Millis) -> bool {
        self.now = now;
        if BASE_FDS + self.conns.len() + 1 > self.cfg.fd_limit {
            self.refused += 1;
            log::debug!(
                "{}: refusing {conn}, fd limit {} reached",
                self.cfg.name,
                self.cfg.fd_limit
            );
            return false;
        }
        self.conns.insert(
            conn,
            IocConn {
                channels: HashMap::new(),
                live: Liveness::new(now),
            },
        );
        true
    }

    fn on_connected(&mut self, _conn: ConnId, _now: Millis) {}

    fn on_connect_failed(&mut self, _conn: ConnId, _now: Millis) {}

    fn on_frame(&mut self, conn: ConnId, frame: Frame, now: Millis) {
        self.now = now;
        let Some(c) = self.conns.get_mut(&conn) else {
            return;
        };
        c.live.last_rx = now;
        self.msgs_in.record(now, 1);
        if !self.backlog.is_empty() || self.saturated(now) {
            self.backlog.push_back((conn, frame));
        } else {
            self.handle(conn, frame);
        }
    }

    fn on_closed(&mut self, conn: ConnId, now: Millis) {
        self.now = now;
        self.drop_conn(conn);
    }

    fn on_tick(&mut self, now: Millis) {
        self.now = now;
        while !self.backlog.is_empty() && !self.saturated(now) {
            let (conn, frame) = self.backlog.pop_front().expect("non-empty");
            self.handle(conn, frame);
        }
        let posting = !self.saturated(now);
        self.run_generators(now, posting);
        let dead: Vec<ConnId> = self
            .conns
            .iter()
            .filter(|(_, c)| c.live.dead(now))
            .map(|(id, _)| *id)
            .collect();
        for conn in dead {
            log::debug!("{}: {conn} silent, closing", self.cfg.name);
            self.drop_conn(conn);
            self.out.close(conn);
        }
    }

    fn next_deadline(&self) -> Option<Millis> {
        let gens = self.due.peek().map(|Reverse((t, _))| *t);
        let conns = self
            .conns
            .values()
            .map(|c| c.live.last_rx + crate::node::DEAD_AFTER_MS)
            .min();
        let backlog = (!self.backlog.is_empty()).then(|| (self.now / 1000 + 1) * 1000);
        [gens, conns, backlog].into_iter().flatten().min()
    }

    fn drain_io(&mut self) -> Vec<Io> {
        self.out.drain()
    }
}
