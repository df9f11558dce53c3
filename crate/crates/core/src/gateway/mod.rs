//! Caching protocol gateway.
//!
//! The gateway is a server to any number of downstream clients and a client
//! to a set of upstream IOCs. Each upstream IOC gets at most one circuit and
//! each PV at most one upstream channel and subscription, however many
//! downstream subscribers it has. Values are answered from the cache, writes
//! are checked against the merged access-security file using the client's
//! identity and then performed upstream under the gateway's own identity.

mod cache;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{
    cache_transition, CacheAction, CacheEntry, CacheError, CacheEvent, CacheState, Subscriber,
    UpstreamRef,
};

use crate::acf::{
    merge_acf, parse_acf, AccessSecurityConfig, AcfError, Level, MergeMode, DEFAULT_ASG,
};
use crate::config::{ConfigError, KeyValues};
use crate::iocsim::BASE_FDS;
use crate::node::{ConnId, Endpoint, Io, Liveness, Millis, Node, Outbox, DEAD_AFTER_MS};
use crate::proto::{
    Access, ChannelValue, DType, Frame, Identity, Message, Severity, Status, Value,
};
use crate::rate::{format_rate, RateWindow};

pub const GATEWAY_KEYS: [&str; 10] = [
    "listen",
    "upstream",
    "acf",
    "hold_seconds",
    "stats_prefix",
    "stats_window_secs",
    "strict_merge",
    "poll_ms",
    "user",
    "host",
];

pub const DEFAULT_HOLD_SECONDS: u64 = 7200;
pub const NEGATIVE_CACHE_MS: Millis = 30_000;
pub const SEARCH_TIMEOUT_MS: Millis = 2_000;
/// First re-resolution attempt after an upstream is lost.
pub const RESOLVE_RETRY_MS: Millis = 1_000;
/// Spacing of later attempts while the PV cannot be found.
pub const RESOLVE_BACKOFF_MS: Millis = 5_000;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("bind failed: {0}")]
    BindFailed(String),
    #[error("access security: {0}")]
    Acf(#[from] AcfError),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("upstream down")]
    UpstreamDown,
    #[error("access denied")]
    AccessDenied,
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub upstreams: Vec<Endpoint>,
    pub listen: Endpoint,
    /// One file, or several per-IOC files merged at startup.
    pub acf_paths: Vec<PathBuf>,
    pub hold_seconds: u64,
    pub stats_prefix: String,
    pub stats_window_secs: u64,
    pub strict_merge: bool,
    /// Poll upstream values every N ms instead of subscribing.
    pub poll_ms: Option<u64>,
    /// Identity presented on upstream channels.
    pub identity: Identity,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            upstreams: Vec::new(),
            listen: Endpoint::new("0.0.0.0:5064"),
            acf_paths: Vec::new(),
            hold_seconds: DEFAULT_HOLD_SECONDS,
            stats_prefix: "gw:".into(),
            stats_window_secs: 10,
            strict_merge: false,
            poll_ms: None,
            identity: Identity::new("gateway", "gateway"),
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.upstreams.is_empty() {
            return Err(GatewayError::Config(
                "at least one upstream is required".into(),
            ));
        }
        if self.identity.user.is_empty() {
            return Err(GatewayError::Config(
                "gateway user must not be empty".into(),
            ));
        }
        if self.poll_ms == Some(0) {
            return Err(GatewayError::Config(
                "poll interval must be at least 1 ms".into(),
            ));
        }
        Ok(())
    }

    /// Overlays a `key = value` file on the defaults. `upstream` and `acf`
    /// take comma-separated lists; `user` and `host` set the identity.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self, GatewayError> {
        let cfg_err = |e: ConfigError| GatewayError::Config(e.to_string());
        kv.expect_only(&GATEWAY_KEYS).map_err(cfg_err)?;
        let mut c = GatewayConfig::default();
        if let Some(v) = kv.get("listen") {
            c.listen = Endpoint::new(v);
        }
        if let Some(list) = kv.list("upstream") {
            c.upstreams = list.into_iter().map(Endpoint::new).collect();
        }
        if let Some(list) = kv.list("acf") {
            c.acf_paths = list.into_iter().map(PathBuf::from).collect();
        }
        if let Some(v) = kv.parse("hold_seconds").map_err(cfg_err)? {
            c.hold_seconds = v;
        }
        if let Some(v) = kv.get("stats_prefix") {
            c.stats_prefix = v.to_string();
        }
        if let Some(v) = kv.parse("stats_window_secs").map_err(cfg_err)? {
            c.stats_window_secs = v;
        }
        if let Some(v) = kv.flag("strict_merge").map_err(cfg_err)? {
            c.strict_merge = v;
        }
        c.poll_ms = kv.parse("poll_ms").map_err(cfg_err)?;
        if let Some(v) = kv.get("user") {
            c.identity.user = v.to_string();
        }
        if let Some(v) = kv.get("host") {
            c.identity.host = v.to_string();
        }
        Ok(c)
    }

    /// Reads and merges the configured ACF files. With no files, everyone
    /// may read and nobody may write.
    pub fn load_acf(&self) -> Result<AccessSecurityConfig, GatewayError> {
        if self.acf_paths.is_empty() {
            return Ok(parse_acf("ASG(DEFAULT){RULE(1,READ)}")?);
        }
        let configs = self
            .acf_paths
            .iter()
            .map(|path| {
                let text = std::fs::read_to_string(path).map_err(|source| GatewayError::Io {
                    path: path.clone(),
                    source,
                })?;
                Ok(parse_acf(&text)?)
            })
            .collect::<Result<Vec<_>, GatewayError>>()?;
        let mode = if self.strict_merge {
            MergeMode::Strict
        } else {
            MergeMode::Union
        };
        Ok(merge_acf(&configs, mode)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GatewayStats {
    pub alive_pvs: usize,
    pub active_pvs: usize,
    pub client_count: usize,
    pub server_count: usize,
    pub event_rate: f64,
    pub post_rate: f64,
    pub existtest_rate: f64,
    pub fd_count: usize,
}

impl GatewayStats {
    pub fn inactive_pvs(&self) -> usize {
        self.alive_pvs - self.active_pvs
    }
}

impl fmt::Display for GatewayStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Alive PVs:   {}", self.alive_pvs)?;
        writeln!(f, "Active PVs:  {}", self.active_pvs)?;
        writeln!(f, "Clients:     {}", self.client_count)?;
        writeln!(f, "Servers:     {}", self.server_count)?;
        writeln!(f, "Event rate:  {}", format_rate(self.event_rate))?;
        writeln!(f, "Post rate:   {}", format_rate(self.post_rate))?;
        writeln!(f, "Exist tests: {}", format_rate(self.existtest_rate))?;
        write!(f, "FDs:         {}", self.fd_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StatField {
    AlivePvs,
    ActivePvs,
    ClientCount,
    ServerCount,
    EventRate,
    PostRate,
    ExisttestRate,
    FdCount,
}

impl StatField {
    pub const ALL: [StatField; 8] = [
        StatField::AlivePvs,
        StatField::ActivePvs,
        StatField::ClientCount,
        StatField::ServerCount,
        StatField::EventRate,
        StatField::PostRate,
        StatField::ExisttestRate,
        StatField::FdCount,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            StatField::AlivePvs => "alive_pvs",
            StatField::ActivePvs => "active_pvs",
            StatField::ClientCount => "client_count",
            StatField::ServerCount => "server_count",
            StatField::EventRate => "event_rate",
            StatField::PostRate => "post_rate",
            StatField::ExisttestRate => "existtest_rate",
            StatField::FdCount => "fd_count",
        }
    }

    pub fn pick(self, s: &GatewayStats) -> f64 {
        match self {
            StatField::AlivePvs => s.alive_pvs as f64,
            StatField::ActivePvs => s.active_pvs as f64,
            StatField::ClientCount => s.client_count as f64,
            StatField::ServerCount => s.server_count as f64,
            StatField::EventRate => s.event_rate,
            StatField::PostRate => s.post_rate,
            StatField::ExisttestRate => s.existtest_rate,
            StatField::FdCount => s.fd_count as f64,
        }
    }
}

#[derive(Debug)]
enum LinkState {
    Down,
    Connecting(ConnId),
    Up { conn: ConnId, live: Liveness },
}

#[derive(Debug)]
struct Link {
    endpoint: Endpoint,
    state: LinkState,
    /// Carries channels; otherwise the link only exists for searches and is
    /// closed as soon as none are outstanding.
    circuit: bool,
    searches: BTreeMap<u32, String>,
}

impl Link {
    fn conn(&self) -> Option<ConnId> {
        match self.state {
            LinkState::Down => None,
            LinkState::Connecting(c) | LinkState::Up { conn: c, .. } => Some(c),
        }
    }

    fn is_up(&self) -> bool {
        matches!(self.state, LinkState::Up { .. })
    }
}

#[derive(Debug, Default)]
struct Resolution {
    next: usize,
    inflight: Option<(usize, u32)>,
    deadline: Millis,
    searchers: Vec<(ConnId, u32)>,
    chan_waiters: Vec<(ConnId, u32)>,
}

#[derive(Debug)]
struct Entry {
    cache: CacheEntry,
    asg: Option<String>,
    dtype: Option<DType>,
    /// Upstream channel created (CHAN_OK seen) on the current binding.
    bound: bool,
    pending_chans: Vec<(ConnId, u32)>,
    pending_reads: Vec<(ConnId, u32)>,
    read_inflight: bool,
    pending_writes: VecDeque<(ConnId, u32)>,
    poll_at: Option<Millis>,
    /// A write went through while nothing was keeping the cache current.
    stale: bool,
}

impl Entry {
    fn new(pv: &str) -> Self {
        Entry {
            cache: CacheEntry::new(pv),
            asg: None,
            dtype: None,
            bound: false,
            pending_chans: Vec::new(),
            pending_reads: Vec::new(),
            read_inflight: false,
            pending_writes: VecDeque::new(),
            poll_at: None,
            stale: false,
        }
    }
}

#[derive(Debug, Clone)]
enum ChanTarget {
    Pv(String),
    Stat(StatField),
}

#[derive(Debug)]
struct DownChan {
    target: ChanTarget,
    identity: Identity,
    subscribed: bool,
}

#[derive(Debug)]
struct Client {
    live: Liveness,
    chans: BTreeMap<u32, DownChan>,
}

#[derive(Debug)]
pub struct Gateway {
    identity: Identity,
    hold_ms: Millis,
    poll_ms: Option<u64>,
    acf: AccessSecurityConfig,
    stat_names: HashMap<String, StatField>,
    links: Vec<Link>,
    link_by_conn: HashMap<ConnId, usize>,
    entries: BTreeMap<String, Entry>,
    up_chans: HashMap<(usize, u32), String>,
    negative: BTreeMap<String, Millis>,
    resolving: BTreeMap<String, Resolution>,
    retry_at: BTreeMap<String, Millis>,
    clients: BTreeMap<ConnId, Client>,
    stat_subs: BTreeSet<(ConnId, u32, StatField)>,
    next_stat_post: Millis,
    next_cid: u32,
    next_conn: u64,
    event_rate: RateWindow,
    post_rate: RateWindow,
    existtest_rate: RateWindow,
    out: Outbox,
    now: Millis,
}

impl Gateway {
    pub fn new(cfg: &GatewayConfig, acf: AccessSecurityConfig, now: Millis) -> Self {
        let links = cfg
            .upstreams
            .iter()
            .map(|e| Link {
                endpoint: e.clone(),
                state: LinkState::Down,
                circuit: false,
                searches: BTreeMap::new(),
            })
            .collect();
        let stat_names = StatField::ALL
            .iter()
            .map(|f| (format!("{}{}", cfg.stats_prefix, f.suffix()), *f))
            .collect();
        let w = cfg.stats_window_secs;
        Gateway {
            identity: cfg.identity.clone(),
            hold_ms: cfg.hold_seconds * 1000,
            poll_ms: cfg.poll_ms,
            acf,
            stat_names,
            links,
            link_by_conn: HashMap::new(),
            entries: BTreeMap::new(),
            up_chans: HashMap::new(),
            negative: BTreeMap::new(),
            resolving: BTreeMap::new(),
            retry_at: BTreeMap::new(),
            clients: BTreeMap::new(),
            stat_subs: BTreeSet::new(),
            next_stat_post: (now / 1000 + 1) * 1000,
            next_cid: 1,
            next_conn: 1,
            event_rate: RateWindow::new(w, now),
            post_rate: RateWindow::new(w, now),
            existtest_rate: RateWindow::new(w, now),
            out: Outbox::default(),
            now,
        }
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn acf(&self) -> &AccessSecurityConfig {
        &self.acf
    }

    pub fn stats(&self, now: Millis) -> GatewayStats {
        let active = self
            .entries
            .values()
            .filter(|e| e.cache.state == CacheState::Active)
            .count();
        let inactive = self
            .entries
            .values()
            .filter(|e| e.cache.state == CacheState::Inactive)
            .count();
        let client_count = self.clients.len();
        let server_count = self.links.iter().filter(|l| l.circuit && l.is_up()).count();
        GatewayStats {
            alive_pvs: active + inactive,
            active_pvs: active,
            client_count,
            server_count,
            event_rate: self.event_rate.rate(now),
            post_rate: self.post_rate.rate(now),
            existtest_rate: self.existtest_rate.rate(now),
            fd_count: BASE_FDS + client_count + server_count,
        }
    }

    pub fn entry(&self, pv: &str) -> Option<&CacheEntry> {
        self.entries.get(pv).map(|e| &e.cache)
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.values().map(|e| &e.cache)
    }

    /// Upstream the PV is bound to, if resolved.
    pub fn resolved_upstream(&self, pv: &str) -> Option<&Endpoint> {
        let up = self.entries.get(pv)?.cache.upstream?;
        Some(&self.links[up.upstream].endpoint)
    }

    pub fn is_negative(&self, pv: &str, now: Millis) -> bool {
        self.negative.get(pv).is_some_and(|&t| t > now)
    }

    /// Upstream circuits currently open, by configured index.
    pub fn open_circuits(&self) -> Vec<usize> {
        (0..self.links.len())
            .filter(|&i| self.links[i].circuit && self.links[i].is_up())
            .collect()
    }

    fn alloc_cid(&mut self) -> u32 {
        let cid = self.next_cid;
        self.next_cid = self.next_cid.wrapping_add(1).max(1);
        cid
    }

    fn send_down(&mut self, conn: ConnId, msg: &Message) {
        self.out.send(conn, msg);
    }

    fn send_up(&mut self, link: usize, msg: &Message) {
        if let LinkState::Up { conn, .. } = self.links[link].state {
            self.out.send(conn, msg);
        }
    }

    fn stat_value(&self, field: StatField) -> ChannelValue {
        let s = self.stats(self.now);
        ChannelValue::new(
            Value::Double(field.pick(&s)),
            Severity::None,
            self.now * 1_000_000,
        )
    }

    fn access_for(&self, asg: &str, who: &Identity) -> Access {
        Access {
            read: self.acf.allows(asg, who, Level::Read),
            write: self.acf.allows(asg, who, Level::Write),
        }
    }

    // ---- resolution --------------------------------------------------

    fn start_resolution(&mut self, pv: &str) {
        if self.resolving.contains_key(pv) {
            return;
        }
        self.resolving.insert(pv.to_string(), Resolution::default());
        self.probe(pv);
    }

    fn probe(&mut self, pv: &str) {
        let Some(r) = self.resolving.get(pv) else {
            return;
        };
        let idx = r.next;
        if idx >= self.links.len() {
            self.resolution_failed(pv);
            return;
        }
        let cid = self.alloc_cid();
        let link = &mut self.links[idx];
        link.searches.insert(cid, pv.to_string());
        match link.state {
            LinkState::Down => {
                let conn = ConnId::outbound(self.next_conn);
                self.next_conn += 1;
                link.state = LinkState::Connecting(conn);
                self.link_by_conn.insert(conn, idx);
                self.out.connect(conn, link.endpoint.clone());
            }
            LinkState::Connecting(_) => {}
            LinkState::Up { .. } => self.send_up(
                idx,
                &Message::Search {
                    cid,
                    name: pv.to_string(),
                },
            ),
        }
        let r = self.resolving.get_mut(pv).expect("checked above");
        r.inflight = Some((idx, cid));
        r.deadline = self.now + SEARCH_TIMEOUT_MS;
    }

    /// The search `cid` on `link` came back negative (or never will).
    fn search_failed(&mut self, link: usize, cid: u32, pv: &str) {
        if let Some(r) = self.resolving.get_mut(pv) {
            if r.inflight == Some((link, cid)) {
                r.inflight = None;
                r.next = link + 1;
                self.probe(pv);
            }
        }
    }

    fn resolution_failed(&mut self, pv: &str) {
        let Some(r) = self.resolving.remove(pv) else {
            return;
        };
        for (conn, cid) in r.searchers {
            self.send_down(
                conn,
                &Message::SearchFail {
                    cid,
                    name: pv.to_string(),
                },
            );
        }
        for (conn, cid) in r.chan_waiters {
            self.fail_chan(conn, cid, Status::NotFound);
        }
        if self.entries.contains_key(pv) {
            self.retry_at
                .insert(pv.to_string(), self.now + RESOLVE_BACKOFF_MS);
        } else {
            self.negative
                .insert(pv.to_string(), self.now + NEGATIVE_CACHE_MS);
        }
    }

    fn resolution_ok(&mut self, pv: &str, link: usize) {
        let Some(r) = self.resolving.remove(pv) else {
            return;
        };
        self.links[link].circuit = true;
        let cid = self.alloc_cid();
        let entry = self
            .entries
            .entry(pv.to_string())
            .or_insert_with(|| Entry::new(pv));
        entry.cache.upstream = Some(UpstreamRef {
            upstream: link,
            cid,
        });
        entry.bound = false;
        entry.pending_chans.extend(r.chan_waiters);
        self.up_chans.insert((link, cid), pv.to_string());
        self.send_up(
            link,
            &Message::CreateChan {
                cid,
                name: pv.to_string(),
                identity: self.identity.clone(),
            },
        );
        for (conn, scid) in r.searchers {
            self.send_down(
                conn,
                &Message::SearchOk {
                    cid: scid,
                    name: pv.to_string(),
                },
            );
        }
    }

    fn maybe_close_probe_link(&mut self, link: usize) {
        let l = &mut self.links[link];
        if l.circuit || !l.searches.is_empty() {
            return;
        }
        if let Some(conn) = l.conn() {
            l.state = LinkState::Down;
            self.link_by_conn.remove(&conn);
            self.out.close(conn);
        }
    }

    fn link_lost(&mut self, link: usize) {
        let l = &mut self.links[link];
        if let Some(conn) = l.conn() {
            self.link_by_conn.remove(&conn);
        }
        l.state = LinkState::Down;
        let was_circuit = std::mem::replace(&mut l.circuit, false);
        let searches = std::mem::take(&mut l.searches);
        for (cid, pv) in searches {
            self.search_failed(link, cid, &pv);
        }
        if !was_circuit {
            return;
        }
        log::info!("upstream {} lost", self.links[link].endpoint);
        self.up_chans.retain(|(l, _), _| *l != link);
        let bound: Vec<String> = self
            .entries
            .iter()
            .filter(|(_, e)| e.cache.upstream.is_some_and(|u| u.upstream == link))
            .map(|(pv, _)| pv.clone())
            .collect();
        for pv in bound {
            if let Some(e) = self.entries.get_mut(&pv) {
                e.bound = false;
                e.read_inflight = false;
                e.poll_at = None;
                let reads = std::mem::take(&mut e.pending_reads);
                let writes = std::mem::take(&mut e.pending_writes);
                for (conn, cid) in reads {
                    self.send_down(
                        conn,
                        &Message::ReadReply {
                            cid,
                            result: Err(Status::UpstreamDown),
                        },
                    );
                }
                for (conn, cid) in writes {
                    self.send_down(
                        conn,
                        &Message::WriteDenied {
                            cid,
                            status: Status::UpstreamDown,
                        },
                    );
                }
            }
            self.apply(&pv, CacheEvent::UpstreamLost);
        }
    }

    // ---- cache -------------------------------------------------------

    fn apply(&mut self, pv: &str, event: CacheEvent) {
        let Some(entry) = self.entries.get_mut(pv) else {
            return;
        };
        let current = entry.cache.clone();
        let (next, actions) = match current.transition(event, self.now, self.hold_ms) {
            Ok(r) => r,
            Err(e) => {
                log::error!("{e}; dropping entry");
                self.remove_entry(pv);
                return;
            }
        };
        let upstream = next.upstream;
        entry.cache = next;
        for action in actions {
            match action {
                CacheAction::SendEventAdd => {
                    if let Some(up) = upstream {
                        match self.poll_ms {
                            Some(_) => {
                                if let Some(e) = self.entries.get_mut(pv) {
                                    e.poll_at = Some(self.now);
                                }
                            }
                            None => self.send_up(up.upstream, &Message::EventAdd { cid: up.cid }),
                        }
                    }
                }
                CacheAction::SendEventCancel => {
                    if let Some(up) = upstream {
                        match self.poll_ms {
                            Some(_) => {
                                if let Some(e) = self.entries.get_mut(pv) {
                                    e.poll_at = None;
                                }
                            }
                            None => self.send_up(
                                up.upstream,
                                &Message::EventCancel {
                                    cid: up.cid,
                                    status: Status::Ok,
                                },
                            ),
                        }
                    }
                }
                CacheAction::SendClearChan => {
                    if let Some(up) = upstream {
                        self.send_up(up.upstream, &Message::ClearChan { cid: up.cid });
                    }
                }
                CacheAction::Post { to, value } => {
                    self.post_rate.record(self.now, to.len() as u64);
                    for sub in to {
                        self.send_down(
                            sub.conn,
                            &Message::Event {
                                cid: sub.cid,
                                value: value.clone(),
                            },
                        );
                    }
                }
                CacheAction::ScheduleResolve => {
                    self.retry_at
                        .insert(pv.to_string(), self.now + RESOLVE_RETRY_MS);
                }
            }
        }
        if self
            .entries
            .get(pv)
            .is_some_and(|e| e.cache.state == CacheState::Evicted)
        {
            self.remove_entry(pv);
        }
    }

    fn remove_entry(&mut self, pv: &str) {
        if let Some(e) = self.entries.remove(pv) {
            if let Some(up) = e.cache.upstream {
                self.up_chans.remove(&(up.upstream, up.cid));
            }
        }
        self.retry_at.remove(pv);
    }

    // ---- downstream --------------------------------------------------

    fn fail_chan(&mut self, conn: ConnId, cid: u32, status: Status) {
        if let Some(c) = self.clients.get_mut(&conn) {
            c.chans.remove(&cid);
        }
        self.send_down(conn, &Message::ChanFail { cid, status });
    }

    fn chan_ok(&mut self, conn: ConnId, cid: u32) {
        let Some(ch) = self.clients.get(&conn).and_then(|c| c.chans.get(&cid)) else {
            return;
        };
        let ChanTarget::Pv(pv) = &ch.target else {
            return;
        };
        let Some(e) = self.entries.get(pv) else {
            return;
        };
        let asg = e.asg.clone().unwrap_or_else(|| DEFAULT_ASG.to_string());
        let dtype = e.dtype.unwrap_or(DType::Double);
        let access = self.access_for(&asg, &ch.identity);
        self.send_down(
            conn,
            &Message::ChanOk {
                cid,
                dtype,
                access,
                asg,
            },
        );
    }

    fn down_chan(&self, conn: ConnId, cid: u32) -> Option<(ChanTarget, Identity, bool)> {
        let ch = self.clients.get(&conn)?.chans.get(&cid)?;
        Some((ch.target.clone(), ch.identity.clone(), ch.subscribed))
    }

    fn set_subscribed(&mut self, conn: ConnId, cid: u32, on: bool) {
        if let Some(ch) = self
            .clients
            .get_mut(&conn)
            .and_then(|c| c.chans.get_mut(&cid))
        {
            ch.subscribed = on;
        }
    }

    fn unsubscribe(&mut self, conn: ConnId, cid: u32) {
        let Some((target, _, subscribed)) = self.down_chan(conn, cid) else {
            return;
        };
        if !subscribed {
            return;
        }
        self.set_subscribed(conn, cid, false);
        match target {
            ChanTarget::Stat(f) => {
                self.stat_subs.remove(&(conn, cid, f));
            }
            ChanTarget::Pv(pv) => {
                self.apply(&pv, CacheEvent::ClientUnsubscribe(Subscriber { conn, cid }))
            }
        }
    }

    fn drop_client(&mut self, conn: ConnId) {
        let cids: Vec<u32> = self
            .clients
            .get(&conn)
            .map(|c| c.chans.keys().copied().collect())
            .unwrap_or_default();
        for cid in cids {
            self.unsubscribe(conn, cid);
        }
        self.clients.remove(&conn);
        for e in self.entries.values_mut() {
            e.pending_chans.retain(|(c, _)| *c != conn);
            e.pending_reads.retain(|(c, _)| *c != conn);
            // keep write slots so upstream verdicts stay aligned; replies to
            // a closed connection are dropped by the transport
        }
        for r in self.resolving.values_mut() {
            r.searchers.retain(|(c, _)| *c != conn);
            r.chan_waiters.retain(|(c, _)| *c != conn);
        }
    }

    fn handle_down(&mut self, conn: ConnId, msg: Message) {
        match msg {
            Message::Search { cid, name } => {
                self.existtest_rate.record(self.now, 1);
                if self.stat_names.contains_key(&name) || self.entries.contains_key(&name) {
                    self.send_down(conn, &Message::SearchOk { cid, name });
                } else if self.is_negative(&name, self.now) {
                    self.send_down(conn, &Message::SearchFail { cid, name });
                } else {
                    self.start_resolution(&name);
                    if let Some(r) = self.resolving.get_mut(&name) {
                        r.searchers.push((conn, cid));
                    }
                }
            }
            Message::CreateChan {
                cid,
                name,
                identity,
            } => {
                self.unsubscribe(conn, cid);
                if let Some(&field) = self.stat_names.get(&name) {
                    self.insert_chan(conn, cid, ChanTarget::Stat(field), identity);
                    self.send_down(
                        conn,
                        &Message::ChanOk {
                            cid,
                            dtype: DType::Double,
                            access: Access {
                                read: true,
                                write: false,
                            },
                            asg: DEFAULT_ASG.to_string(),
                        },
                    );
                    return;
                }
                self.insert_chan(conn, cid, ChanTarget::Pv(name.clone()), identity);
                let negative = self.is_negative(&name, self.now);
                match self.entries.get_mut(&name) {
                    Some(e) if e.asg.is_some() => self.chan_ok(conn, cid),
                    Some(e) => e.pending_chans.push((conn, cid)),
                    None if negative => self.fail_chan(conn, cid, Status::NotFound),
                    None => {
                        self.start_resolution(&name);
                        if let Some(r) = self.resolving.get_mut(&name) {
                            r.chan_waiters.push((conn, cid));
                        }
                    }
                }
            }
            Message::Read { cid } => self.serve_read(conn, cid),
            Message::Write { cid, value } => {
                let status = self.forward_write(conn, cid, value);
                if let Some(status) = status {
                    let reply = match status {
                        Status::Ok => Message::WriteOk { cid },
                        status => Message::WriteDenied { cid, status },
                    };
                    self.send_down(conn, &reply);
                }
            }
            Message::EventAdd { cid } => self.subscribe(conn, cid),
            Message::EventCancel { cid, .. } => self.unsubscribe(conn, cid),
            Message::ClearChan { cid } => {
                self.unsubscribe(conn, cid);
                if let Some(c) = self.clients.get_mut(&conn) {
                    c.chans.remove(&cid);
                }
            }
            Message::Echo { cid } => self.send_down(conn, &Message::EchoReply { cid }),
            Message::EchoReply { .. } => {}
            other => {
                log::debug!("unexpected {:?} from client {conn}", other.command());
                self.drop_client(conn);
                self.out.close(conn);
            }
        }
    }

    fn insert_chan(&mut self, conn: ConnId, cid: u32, target: ChanTarget, identity: Identity) {
        if let Some(c) = self.clients.get_mut(&conn) {
            c.chans.insert(
                cid,
                DownChan {
                    target,
                    identity,
                    subscribed: false,
                },
            );
        }
    }

    fn subscribe(&mut self, conn: ConnId, cid: u32) {
        let Some((target, who, subscribed)) = self.down_chan(conn, cid) else {
            self.send_down(
                conn,
                &Message::EventCancel {
                    cid,
                    status: Status::NotFound,
                },
            );
            return;
        };
        if subscribed {
            return;
        }
        match target {
            ChanTarget::Stat(field) => {
                self.set_subscribed(conn, cid, true);
                self.stat_subs.insert((conn, cid, field));
                let value = self.stat_value(field);
                self.send_down(conn, &Message::Event { cid, value });
            }
            ChanTarget::Pv(pv) => {
                let asg = self.entries.get(&pv).and_then(|e| e.asg.clone());
                let Some(asg) = asg else {
                    self.send_down(
                        conn,
                        &Message::EventCancel {
                            cid,
                            status: Status::NotFound,
                        },
                    );
                    return;
                };
                if !self.acf.allows(&asg, &who, Level::Read) {
                    self.send_down(
                        conn,
                        &Message::EventCancel {
                            cid,
                            status: Status::Denied,
                        },
                    );
                    return;
                }
                self.set_subscribed(conn, cid, true);
                self.apply(&pv, CacheEvent::ClientSubscribe(Subscriber { conn, cid }));
            }
        }
    }

    /// Answers from the cache when the entry holds a value; otherwise reads
    /// through to the upstream once and caches the reply.
    fn serve_read(&mut self, conn: ConnId, cid: u32) {
        let reply = |result| Message::ReadReply { cid, result };
        let Some((target, who, _)) = self.down_chan(conn, cid) else {
            self.send_down(conn, &reply(Err(Status::NotFound)));
            return;
        };
        let pv = match target {
            ChanTarget::Stat(f) => {
                let v = self.stat_value(f);
                self.send_down(conn, &reply(Ok(v)));
                return;
            }
            ChanTarget::Pv(pv) => pv,
        };
        let Some(e) = self.entries.get(&pv) else {
            self.send_down(conn, &reply(Err(Status::NotFound)));
            return;
        };
        let Some(asg) = e.asg.clone() else {
            self.send_down(conn, &reply(Err(Status::UpstreamDown)));
            return;
        };
        if !self.acf.allows(&asg, &who, Level::Read) {
            self.send_down(conn, &reply(Err(Status::Denied)));
            return;
        }
        let e = self.entries.get_mut(&pv).expect("checked above");
        match (e.cache.state, &e.cache.last_value) {
            (CacheState::Active | CacheState::Inactive, Some(v)) if !e.stale => {
                let v = v.clone();
                self.send_down(conn, &reply(Ok(v)));
            }
            _ if !e.bound => self.send_down(conn, &reply(Err(Status::UpstreamDown))),
            _ => {
                e.pending_reads.push((conn, cid));
                if !e.read_inflight {
                    e.read_inflight = true;
                    let up = e.cache.upstream.expect("bound entries have an upstream");
                    self.send_up(up.upstream, &Message::Read { cid: up.cid });
                }
            }
        }
    }

    /// `None` when the verdict will come from upstream.
    fn forward_write(&mut self, conn: ConnId, cid: u32, value: ChannelValue) -> Option<Status> {
        let Some((target, who, _)) = self.down_chan(conn, cid) else {
            return Some(Status::NotFound);
        };
        let ChanTarget::Pv(pv) = target else {
            return Some(Status::Denied);
        };
        let Some(e) = self.entries.get_mut(&pv) else {
            return Some(Status::NotFound);
        };
        let Some(asg) = e.asg.as_deref() else {
            return Some(Status::UpstreamDown);
        };
        if !self.acf.allows(asg, &who, Level::Write) {
            return Some(Status::Denied);
        }
        if !e.bound {
            return Some(Status::UpstreamDown);
        }
        let up = e.cache.upstream.expect("bound entries have an upstream");
        e.pending_writes.push_back((conn, cid));
        self.send_up(up.upstream, &Message::Write { cid: up.cid, value });
        None
    }

    // ---- upstream ----------------------------------------------------

    fn handle_up(&mut self, link: usize, msg: Message) {
        match msg {
            Message::SearchOk { cid, .. } => {
                if let Some(pv) = self.links[link].searches.remove(&cid) {
                    let ours = self
                        .resolving
                        .get(&pv)
                        .is_some_and(|r| r.inflight == Some((link, cid)));
                    if ours {
                        self.resolution_ok(&pv, link);
                    }
                }
                self.maybe_close_probe_link(link);
            }
            Message::SearchFail { cid, .. } => {
                if let Some(pv) = self.links[link].searches.remove(&cid) {
                    self.search_failed(link, cid, &pv);
                }
                self.maybe_close_probe_link(link);
            }
            Message::ChanOk {
                cid, dtype, asg, ..
            } => {
                let Some(pv) = self.up_chans.get(&(link, cid)).cloned() else {
                    return;
                };
                let Some(e) = self.entries.get_mut(&pv) else {
                    return;
                };
                e.asg = Some(asg);
                e.dtype = Some(dtype);
                e.bound = true;
                let waiting = std::mem::take(&mut e.pending_chans);
                self.apply(&pv, CacheEvent::UpstreamConnected);
                for (conn, dcid) in waiting {
                    self.chan_ok(conn, dcid);
                }
            }
            Message::ChanFail { cid, status } => {
                let Some(pv) = self.up_chans.remove(&(link, cid)) else {
                    return;
                };
                log::warn!("upstream refused channel for {pv}: {status:?}");
                let Some(e) = self.entries.get_mut(&pv) else {
                    return;
                };
                let waiting = std::mem::take(&mut e.pending_chans);
                for (conn, dcid) in waiting {
                    self.fail_chan(conn, dcid, status);
                }
                let e = self.entries.get_mut(&pv).expect("present");
                e.cache.upstream = None;
                if e.cache.subscribers.is_empty() && e.cache.last_value.is_none() {
                    self.remove_entry(&pv);
                } else {
                    self.retry_at.insert(pv, self.now + RESOLVE_BACKOFF_MS);
                }
            }
            Message::Event { cid, value } => {
                let Some(pv) = self.up_chans.get(&(link, cid)).cloned() else {
                    return;
                };
                self.event_rate.record(self.now, 1);
                self.apply(&pv, CacheEvent::UpstreamEvent(value));
            }
            Message::ReadReply { cid, result } => {
                let Some(pv) = self.up_chans.get(&(link, cid)).cloned() else {
                    return;
                };
                let Some(e) = self.entries.get_mut(&pv) else {
                    return;
                };
                e.read_inflight = false;
                e.stale &= result.is_err();
                let readers = std::mem::take(&mut e.pending_reads);
                let polling = e.poll_at.is_some();
                for (conn, dcid) in readers {
                    self.send_down(
                        conn,
                        &Message::ReadReply {
                            cid: dcid,
                            result: result.clone(),
                        },
                    );
                }
                if let Ok(v) = result {
                    if polling {
                        self.event_rate.record(self.now, 1);
                        self.apply(&pv, CacheEvent::UpstreamEvent(v));
                    } else {
                        self.apply(&pv, CacheEvent::UpstreamRead(v));
                    }
                }
            }
            Message::WriteOk { cid } | Message::WriteDenied { cid, .. } => {
                let status = match msg {
                    Message::WriteDenied { status, .. } => status,
                    _ => Status::Ok,
                };
                let Some(pv) = self.up_chans.get(&(link, cid)).cloned() else {
                    return;
                };
                let requester = self.entries.get_mut(&pv).and_then(|e| {
                    // subscribed entries hear about the write as an EVENT
                    if status == Status::Ok
                        && (e.cache.state != CacheState::Active || e.poll_at.is_some())
                    {
                        e.stale = true;
                    }
                    e.pending_writes.pop_front()
                });
                if let Some((conn, dcid)) = requester {
                    let reply = match status {
                        Status::Ok => Message::WriteOk { cid: dcid },
                        status => Message::WriteDenied { cid: dcid, status },
                    };
                    self.send_down(conn, &reply);
                }
            }
            Message::EventCancel { cid, status } => {
                if let Some(pv) = self.up_chans.get(&(link, cid)) {
                    log::warn!("upstream cancelled monitor on {pv}: {status:?}");
                }
            }
            Message::Echo { cid } => self.send_up(link, &Message::EchoReply { cid }),
            Message::EchoReply { .. } => {}
            other => {
                log::warn!(
                    "unexpected {:?} from upstream {}, dropping link",
                    other.command(),
                    self.links[link].endpoint
                );
                if let Some(conn) = self.links[link].conn() {
                    self.out.close(conn);
                }
                self.link_lost(link);
            }
        }
    }

    fn post_stats(&mut self) {
        let subs: Vec<_> = self.stat_subs.iter().copied().collect();
        for (conn, cid, field) in subs {
            let value = self.stat_value(field);
            self.send_down(conn, &Message::Event { cid, value });
        }
    }
}

impl Node for Gateway {
    fn on_accept(&mut self, conn: ConnId, now: Millis) -> bool {
        self.now = now;
        self.clients.insert(
            conn,
            Client {
                live: Liveness::new(now),
                chans: BTreeMap::new(),
            },
        );
        true
    }

    fn on_connected(&mut self, conn: ConnId, now: Millis) {
        self.now = now;
        let Some(&link) = self.link_by_conn.get(&conn) else {
            return;
        };
        let l = &mut self.links[link];
        l.state = LinkState::Up {
            conn,
            live: Liveness::new(now),
        };
        let searches: Vec<(u32, String)> =
            l.searches.iter().map(|(c, p)| (*c, p.clone())).collect();
        for (cid, name) in searches {
            self.send_up(link, &Message::Search { cid, name });
        }
    }

    fn on_connect_failed(&mut self, conn: ConnId, now: Millis) {
        self.now = now;
        if let Some(&link) = self.link_by_conn.get(&conn) {
            log::debug!("connect to {} failed", self.links[link].endpoint);
            self.link_lost(link);
        }
    }

    fn on_frame(&mut self, conn: ConnId, frame: Frame, now: Millis) {
        self.now = now;
        let msg = Message::from_frame(&frame);
        if let Some(&link) = self.link_by_conn.get(&conn) {
            if let LinkState::Up { live, .. } = &mut self.links[link].state {
                live.last_rx = now;
            }
            match msg {
                Ok(m) => self.handle_up(link, m),
                Err(e) => {
                    log::warn!("bad frame from upstream: {e}");
                    self.out.close(conn);
                    self.link_lost(link);
                }
            }
            return;
        }
        let Some(client) = self.clients.get_mut(&conn) else {
            return;
        };
        client.live.last_rx = now;
        match msg {
            Ok(m) => self.handle_down(conn, m),
            Err(e) => {
                log::debug!("bad frame from client {conn}: {e}");
                self.drop_client(conn);
                self.out.close(conn);
            }
        }
    }

    fn on_closed(&mut self, conn: ConnId, now: Millis) {
        self.now = now;
        if let Some(&link) = self.link_by_conn.get(&conn) {
            self.link_lost(link);
        } else {
            self.drop_client(conn);
        }
    }

    fn on_tick(&mut self, now: Millis) {
        self.now = now;
        for link in 0..self.links.len() {
            let LinkState::Up { conn, live } = &mut self.links[link].state else {
                continue;
            };
            let conn = *conn;
            if live.dead(now) {
                log::info!("upstream {} silent, dropping", self.links[link].endpoint);
                self.out.close(conn);
                self.link_lost(link);
            } else if live.echo_due(now) {
                live.last_echo = now;
                self.out.send(conn, &Message::Echo { cid: 0 });
            }
        }
        let dead: Vec<ConnId> = self
            .clients
            .iter()
            .filter(|(_, c)| c.live.dead(now))
            .map(|(id, _)| *id)
            .collect();
        for conn in dead {
            self.drop_client(conn);
            self.out.close(conn);
        }
        let timed_out: Vec<(String, usize, u32)> = self
            .resolving
            .iter()
            .filter(|(_, r)| r.deadline <= now)
            .filter_map(|(pv, r)| r.inflight.map(|(l, c)| (pv.clone(), l, c)))
            .collect();
        for (pv, link, cid) in timed_out {
            self.links[link].searches.remove(&cid);
            self.search_failed(link, cid, &pv);
            self.maybe_close_probe_link(link);
        }
        let retry: Vec<String> = self
            .retry_at
            .iter()
            .filter(|(_, &t)| t <= now)
            .map(|(pv, _)| pv.clone())
            .collect();
        for pv in retry {
            self.retry_at.remove(&pv);
            if self
                .entries
                .get(&pv)
                .is_some_and(|e| e.cache.upstream.is_none())
            {
                self.start_resolution(&pv);
            }
        }
        let expiring: Vec<String> = self
            .entries
            .iter()
            .filter(|(_, e)| e.cache.hold_deadline.is_some_and(|d| now > d))
            .map(|(pv, _)| pv.clone())
            .collect();
        for pv in expiring {
            self.apply(&pv, CacheEvent::Tick);
        }
        self.negative.retain(|_, &mut t| t > now);
        if let Some(period) = self.poll_ms {
            let due: Vec<String> = self
                .entries
                .iter()
                .filter(|(_, e)| e.poll_at.is_some_and(|t| t <= now))
                .map(|(pv, _)| pv.clone())
                .collect();
            for pv in due {
                let e = self.entries.get_mut(&pv).expect("listed above");
                e.poll_at = Some(now + period);
                if e.bound && !e.read_inflight {
                    e.read_inflight = true;
                    let up = e.cache.upstream.expect("bound entries have an upstream");
                    self.send_up(up.upstream, &Message::Read { cid: up.cid });
                }
            }
        }
        if now >= self.next_stat_post {
            self.next_stat_post = (now / 1000 + 1) * 1000;
            self.post_stats();
        }
    }

    fn next_deadline(&self) -> Option<Millis> {
        let links = self.links.iter().filter_map(|l| match &l.state {
            LinkState::Up { live, .. } => Some(live.next_deadline()),
            _ => None,
        });
        let clients = self
            .clients
            .values()
            .map(|c| c.live.last_rx + DEAD_AFTER_MS);
        let searches = self
            .resolving
            .values()
            .filter(|r| r.inflight.is_some())
            .map(|r| r.deadline);
        let retries = self.retry_at.values().copied();
        let holds = self
            .entries
            .values()
            .filter_map(|e| e.cache.hold_deadline.map(|d| d + 1));
        let polls = self.entries.values().filter_map(|e| e.poll_at);
        let stats = (!self.stat_subs.is_empty()).then_some(self.next_stat_post);
        links
            .chain(clients)
            .chain(searches)
            .chain(retries)
            .chain(holds)
            .chain(polls)
            .chain(stats)
            .min()
    }

    fn drain_io(&mut self) -> Vec<Io> {
        self.out.drain()
    }
}
