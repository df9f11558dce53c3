#![allow(dead_code)]

use std::collections::BTreeMap;

use proptest::prelude::*;
use pvgate::acf::{parse_acf, AccessSecurityConfig};
use pvgate::client::{AddressList, ClientCore, ClientEvent, OpId};
use pvgate::gateway::{Gateway, GatewayConfig};
use pvgate::iocsim::{load_database, IocConfig, IocServer};
use pvgate::node::{Endpoint, Millis};
use pvgate::proto::{ChannelValue, Command, Frame, Identity, Severity, Value};
use pvgate::sim::{Captured, NodeId, SimNet};

pub const OPEN_ACF: &str = "ASG(DEFAULT){RULE(1,READ)}";

pub const DCH_ACF: &str = "UAG(dchexpert){alice}\n\
    ASG(DEFAULT){RULE(1,READ)}\n\
    ASG(dch){RULE(1,READ) RULE(1,WRITE){UAG(dchexpert)}}";

pub fn id(user: &str, host: &str) -> Identity {
    Identity::new(user, host)
}

pub fn ep(s: &str) -> Endpoint {
    Endpoint::new(s)
}

pub fn ioc_with(name: &str, db: &str, acf: &str, cfg: IocConfig) -> IocServer {
    let records = load_database(db).expect("test database parses");
    let acf = parse_acf(acf).expect("test ACF parses");
    IocServer::new(
        records,
        acf,
        IocConfig {
            name: name.into(),
            ..cfg
        },
        0,
    )
}

pub fn ioc(name: &str, db: &str) -> IocServer {
    ioc_with(name, db, OPEN_ACF, IocConfig::default())
}

/// `n` PVs named `{prefix}{i}` with the given generator, 100 ms period.
pub fn db(prefix: &str, n: usize, generator: &str, amplitude: f64) -> String {
    (0..n)
        .map(|i| format!("pv {prefix}{i} DOUBLE DEFAULT {generator} 100 {amplitude}\n"))
        .collect()
}

pub fn gateway_cfg(upstreams: &[&str], hold_seconds: u64) -> GatewayConfig {
    GatewayConfig {
        upstreams: upstreams.iter().map(|u| ep(u)).collect(),
        listen: ep("gw:5064"),
        hold_seconds,
        identity: id("gwrun", "gwhost"),
        ..GatewayConfig::default()
    }
}

pub fn gateway(upstreams: &[&str], acf: &str, hold_seconds: u64) -> Gateway {
    Gateway::new(
        &gateway_cfg(upstreams, hold_seconds),
        parse_acf(acf).expect("test ACF parses"),
        0,
    )
}

pub fn add_client(
    net: &mut SimNet,
    name: &str,
    list: &[&str],
    strict: bool,
    who: Identity,
) -> NodeId {
    let list = AddressList::new(list.iter().map(|e| ep(e)).collect(), strict).unwrap();
    let now = net.now();
    net.add(name, ClientCore::new(list, who, now), None)
}

/// Runs in 10 ms steps until `op` reports, at most `max_ms`.
pub fn wait_event(net: &mut SimNet, client: NodeId, op: OpId, max_ms: Millis) -> ClientEvent {
    let end = net.now() + max_ms;
    loop {
        if let Some(e) = net.with_client(client, |c, _| c.take_event_for(op)) {
            return e;
        }
        assert!(net.now() < end, "no event for op {op} within {max_ms} ms");
        net.run_for(10);
    }
}

/// Frames sent by `from` to `to` with command `cmd`.
pub fn count_frames(cap: &[Captured], from: NodeId, to: NodeId, cmd: Command) -> usize {
    cap.iter()
        .filter(|c| c.from == from && c.to == to && c.frame.command == cmd.code())
        .count()
}

pub fn frames_between(cap: &[Captured], from: NodeId, to: NodeId) -> usize {
    cap.iter().filter(|c| c.from == from && c.to == to).count()
}

pub fn double(v: f64) -> ChannelValue {
    ChannelValue::new(Value::Double(v), Severity::None, 0)
}

// ---- structured generators ---------------------------------------------

pub fn severity() -> impl Strategy<Value = Severity> {
    prop_oneof![
        Just(Severity::None),
        Just(Severity::Minor),
        Just(Severity::Major),
        Just(Severity::Invalid)
    ]
}

pub fn value() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<u64>().prop_map(|b| Value::Double(f64::from_bits(b))),
        any::<i32>().prop_map(Value::Int32),
        ".{0,40}".prop_map(Value::Str),
    ]
}

pub fn channel_value() -> impl Strategy<Value = ChannelValue> {
    (value(), severity(), any::<u64>()).prop_map(|(v, s, t)| ChannelValue::new(v, s, t))
}

pub fn frame() -> impl Strategy<Value = Frame> {
    (
        any::<u8>(),
        any::<u32>(),
        proptest::collection::vec(any::<u8>(), 0..200),
    )
        .prop_map(|(command, cid, payload)| Frame {
            command,
            cid,
            payload,
        })
}

pub fn command() -> impl Strategy<Value = Command> {
    proptest::sample::select(Command::ALL.to_vec())
}

// ---- access-security model and brute-force oracle ----------------------

pub const USERS: [&str; 4] = ["alice", "bob", "carol", "gwrun"];
pub const HOSTS: [&str; 2] = ["ws1", "CTL01"];
pub const UAG_POOL: [&str; 3] = ["ops", "dchexpert", "guests"];
pub const HAG_POOL: [&str; 2] = ["control", "public"];
pub const ASG_POOL: [&str; 3] = ["DEFAULT", "dch", "hv"];
/// Queried ASG names, including one no config defines.
pub const QUERY_ASGS: [&str; 4] = ["DEFAULT", "dch", "hv", "unlisted"];

#[derive(Debug, Clone, PartialEq)]
pub struct RuleModel {
    pub write: bool,
    pub uags: Option<Vec<String>>,
    pub hags: Option<Vec<String>>,
}

/// A config held as plain data, rendered to text by hand.
#[derive(Debug, Clone, PartialEq)]
pub struct AcfModel {
    pub uags: BTreeMap<String, Vec<String>>,
    pub hags: BTreeMap<String, Vec<String>>,
    pub asgs: BTreeMap<String, Vec<RuleModel>>,
}

impl AcfModel {
    pub fn text(&self) -> String {
        let mut s = String::from("# generated\n");
        for (n, m) in &self.uags {
            s += &format!("UAG({n}) {{{}}}\n", m.join(","));
        }
        for (n, m) in &self.hags {
            s += &format!("HAG({n}){{ {} }}\n", m.join(" , "));
        }
        for (n, rules) in &self.asgs {
            s += &format!("ASG({n}) {{\n");
            for r in rules {
                s += &format!("  RULE(1,{})", if r.write { "WRITE" } else { "READ" });
                let mut clauses = Vec::new();
                if let Some(u) = &r.uags {
                    clauses.push(format!("UAG({})", u.join(",")));
                }
                if let Some(h) = &r.hags {
                    clauses.push(format!("HAG({})", h.join(",")));
                }
                if !clauses.is_empty() {
                    s += &format!(" {{{}}}", clauses.join(","));
                }
                s += "\n";
            }
            s += "}\n";
        }
        s
    }

    pub fn parse(&self) -> AccessSecurityConfig {
        parse_acf(&self.text()).unwrap_or_else(|e| panic!("{e}\n{}", self.text()))
    }

    /// Naive reading of the rules: find the ASG (or DEFAULT), then any rule
    /// at a sufficient level whose present clauses all match.
    pub fn allows(&self, asg: &str, user: &str, host: &str, write: bool) -> bool {
        let rules = match self.asgs.get(asg) {
            Some(r) => r,
            None => match self.asgs.get("DEFAULT") {
                Some(r) => r,
                None => return false,
            },
        };
        for r in rules {
            if write && !r.write {
                continue;
            }
            let mut user_ok = true;
            if let Some(groups) = &r.uags {
                user_ok = false;
                for g in groups {
                    if self
                        .uags
                        .get(g)
                        .is_some_and(|m| m.iter().any(|u| u == user))
                    {
                        user_ok = true;
                    }
                }
            }
            let mut host_ok = true;
            if let Some(groups) = &r.hags {
                host_ok = false;
                for g in groups {
                    if self
                        .hags
                        .get(g)
                        .is_some_and(|m| m.iter().any(|h| h.to_lowercase() == host.to_lowercase()))
                    {
                        host_ok = true;
                    }
                }
            }
            if user_ok && host_ok {
                return true;
            }
        }
        false
    }
}

fn subset(pool: &'static [&'static str], min: usize) -> impl Strategy<Value = Vec<String>> {
    proptest::sample::subsequence(pool.to_vec(), min..=pool.len())
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn rule() -> impl Strategy<Value = RuleModel> {
    (
        any::<bool>(),
        proptest::option::of(subset(&UAG_POOL, 1)),
        proptest::option::of(subset(&HAG_POOL, 1)),
    )
        .prop_map(|(write, uags, hags)| RuleModel { write, uags, hags })
}

pub fn acf_model() -> impl Strategy<Value = AcfModel> {
    let uags = proptest::collection::vec(subset(&USERS, 0), UAG_POOL.len());
    let hags = proptest::collection::vec(subset(&HOSTS, 0), HAG_POOL.len());
    let asgs = proptest::collection::vec(
        proptest::option::of(proptest::collection::vec(rule(), 0..4)),
        ASG_POOL.len(),
    );
    (uags, hags, asgs).prop_map(|(u, h, a)| AcfModel {
        uags: UAG_POOL.iter().map(|n| n.to_string()).zip(u).collect(),
        hags: HAG_POOL.iter().map(|n| n.to_string()).zip(h).collect(),
        asgs: ASG_POOL
            .iter()
            .zip(a)
            .filter_map(|(n, rules)| rules.map(|r| (n.to_string(), r)))
            .collect(),
    })
}

/// Every (asg, user, host, write) point of the query grid.
pub fn grid() -> Vec<(&'static str, &'static str, &'static str, bool)> {
    let mut out = Vec::new();
    for asg in QUERY_ASGS {
        for user in USERS {
            for host in HOSTS {
                for write in [false, true] {
                    out.push((asg, user, host, write));
                }
            }
        }
    }
    out
}
