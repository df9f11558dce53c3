//! Topology experiments in virtual time.
//!
//! A scenario is run twice with the same seed: once with every client
//! connected straight to the IOCs, once with the public clients behind a
//! gateway. Critical clients stay on the private side in both runs. Stats
//! are sampled every virtual second.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acf::{parse_acf, AccessSecurityConfig};
use crate::client::{AddressList, ClientCore, ClientEvent};
use crate::config::{parse_key_values, ConfigError, KeyValues};
use crate::gateway::{Gateway, GatewayConfig, GatewayStats};
use crate::iocsim::{Generator, IocConfig, IocServer, IocStats, PvRecord};
use crate::node::{Endpoint, Millis, DEAD_AFTER_MS};
use crate::proto::{encode_value, ChannelValue, DType, Identity, Severity};
use crate::sim::{NodeId, SimNet};

/// Gateway clients resubscribe this long after losing a monitor.
pub const RESUBSCRIBE_MS: Millis = 1_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("column {0} not in input")]
    MissingColumn(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub iocs: usize,
    pub pvs_per_ioc: usize,
    /// Assigned to PVs round-robin.
    pub generators: Vec<Generator>,
    pub period_ms: u64,
    pub amplitude: f64,
    /// Public monitoring clients (M). Each monitors every PV.
    pub clients: usize,
    /// Public clients that stay direct in the gateway variant.
    pub direct_public: usize,
    /// Private-side clients, direct in both variants, monitoring every PV.
    pub critical_clients: usize,
    pub duration_secs: u64,
    pub seed: u64,
    pub fd_limit: usize,
    pub capacity: f64,
    pub hold_seconds: u64,
    pub kill_at_secs: Option<u64>,
    pub restart_at_secs: Option<u64>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec::standard()
    }
}

const SPEC_KEYS: [&str; 15] = [
    "iocs",
    "pvs_per_ioc",
    "generators",
    "period_ms",
    "amplitude",
    "clients",
    "direct_public",
    "critical_clients",
    "duration_secs",
    "seed",
    "fd_limit",
    "capacity",
    "hold_seconds",
    "kill_at_secs",
    "restart_at_secs",
];

impl ScenarioSpec {
    /// 2 IOCs with 50 SINE PVs each at 10 Hz, 20 public monitors each
    /// watching all 100 PVs, 30 s.
    pub fn standard() -> Self {
        ScenarioSpec {
            iocs: 2,
            pvs_per_ioc: 50,
            generators: vec![Generator::Sine],
            period_ms: 100,
            amplitude: 5.0,
            clients: 20,
            direct_public: 0,
            critical_clients: 0,
            duration_secs: 30,
            seed: 1,
            fd_limit: crate::iocsim::DEFAULT_FD_LIMIT,
            capacity: 20_000.0,
            hold_seconds: crate::gateway::DEFAULT_HOLD_SECONDS,
            kill_at_secs: None,
            restart_at_secs: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        Self::from_key_values(&parse_key_values(text)?)
    }

    /// Keys missing from the file keep their [`ScenarioSpec::standard`] value.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self, HarnessError> {
        kv.expect_only(&SPEC_KEYS)?;
        let mut s = ScenarioSpec::standard();
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = kv.parse(stringify!($field))? {
                    s.$field = v;
                }
            )*};
        }
        set!(
            iocs,
            pvs_per_ioc,
            period_ms,
            amplitude,
            clients,
            direct_public
        );
        set!(
            critical_clients,
            duration_secs,
            seed,
            fd_limit,
            capacity,
            hold_seconds
        );
        if let Some(v) = kv.parse("kill_at_secs")? {
            s.kill_at_secs = Some(v);
        }
        if let Some(v) = kv.parse("restart_at_secs")? {
            s.restart_at_secs = Some(v);
        }
        if let Some(list) = kv.list("generators") {
            s.generators = list
                .iter()
                .map(|g| {
                    g.parse::<Generator>().map_err(|e| ConfigError::Value {
                        key: "generators".into(),
                        message: e.to_string(),
                    })
                })
                .collect::<Result<_, _>>()?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Scenario(m.to_string()));
        if self.generators.is_empty() {
            return bad("at least one generator is required");
        }
        if self.period_ms == 0 {
            return bad("period_ms must be at least 1");
        }
        if self.capacity.is_nan() || self.capacity <= 0.0 {
            return bad("capacity must be positive");
        }
        if self.direct_public > self.clients {
            return bad("direct_public exceeds clients");
        }
        if let (Some(k), Some(r)) = (self.kill_at_secs, self.restart_at_secs) {
            if r <= k {
                return bad("restart_at_secs must be after kill_at_secs");
            }
        }
        if self.kill_at_secs.is_some_and(|k| k > self.duration_secs) {
            return bad("kill_at_secs is past the end of the run");
        }
        Ok(())
    }

    pub fn gateway_clients(&self) -> usize {
        self.clients - self.direct_public
    }

    pub fn pv_name(ioc: usize, pv: usize) -> String {
        format!("ioc{ioc}:pv{pv}")
    }

    pub fn all_pvs(&self) -> Vec<String> {
        (0..self.iocs)
            .flat_map(|i| (0..self.pvs_per_ioc).map(move |j| Self::pv_name(i, j)))
            .collect()
    }

    pub fn records(&self, ioc: usize) -> Vec<PvRecord> {
        (0..self.pvs_per_ioc)
            .map(|j| {
                let g = self.generators[j % self.generators.len()];
                let dtype = match g {
                    Generator::Counter => DType::Int32,
                    _ => DType::Double,
                };
                PvRecord::new(
                    Self::pv_name(ioc, j),
                    dtype,
                    "DEFAULT",
                    g,
                    self.period_ms,
                    self.amplitude,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Critical,
    Public,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub at: Millis,
    pub pv: String,
    pub value: ChannelValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLog {
    pub name: String,
    pub role: Role,
    pub via_gateway: bool,
    pub deliveries: Vec<Delivery>,
    /// (time, pv, reason) of monitors that ended.
    pub ended: Vec<(Millis, String, String)>,
}

impl ClientLog {
    /// Canonical byte form of the delivery stream: per delivery the time,
    /// the PV name and the encoded value.
    pub fn bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for d in &self.deliveries {
            out.extend_from_slice(&d.at.to_be_bytes());
            out.extend_from_slice(&(d.pv.len() as u16).to_be_bytes());
            out.extend_from_slice(d.pv.as_bytes());
            out.extend(encode_value(&d.value).expect("delivered values encode"));
        }
        out
    }

    /// First INVALID delivery at or after `t`.
    pub fn first_invalid_after(&self, t: Millis) -> Option<Millis> {
        self.deliveries
            .iter()
            .find(|d| d.at >= t && d.value.severity == Severity::Invalid)
            .map(|d| d.at)
    }

    /// Whether a valid value arrived after `t`.
    pub fn valid_after(&self, t: Millis) -> bool {
        self.deliveries
            .iter()
            .any(|d| d.at > t && d.value.severity != Severity::Invalid)
    }

    /// Largest gap between consecutive deliveries of any one PV.
    pub fn max_gap(&self) -> Millis {
        let mut last: BTreeMap<&str, Millis> = BTreeMap::new();
        let mut gap = 0;
        for d in &self.deliveries {
            if let Some(prev) = last.insert(&d.pv, d.at) {
                gap = gap.max(d.at - prev);
            }
        }
        gap
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: u64,
    pub iocs: Vec<IocStats>,
    /// Absent in the direct variant and while the gateway is down.
    pub gateway: Option<GatewayStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub samples: Vec<Sample>,
    pub clients: Vec<ClientLog>,
    pub frames_delivered: u64,
}

impl VariantReport {
    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }

    pub fn critical_logs(&self) -> impl Iterator<Item = &ClientLog> {
        self.clients.iter().filter(|c| c.role == Role::Critical)
    }

    pub fn gateway_logs(&self) -> impl Iterator<Item = &ClientLog> {
        self.clients.iter().filter(|c| c.via_gateway)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub kill_at: Millis,
    pub restart_at: Option<Millis>,
    pub run: VariantReport,
    /// Critical delivery streams match the no-failure run byte for byte.
    pub critical_identical: bool,
    /// Per gateway client, ms from the kill to its first INVALID value.
    pub invalid_latency_ms: Vec<Option<Millis>>,
    /// Per gateway client, whether valid values resumed after restart.
    pub recovered: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub spec: ScenarioSpec,
    pub direct: VariantReport,
    pub gateway: VariantReport,
    pub failure: Option<FailureReport>,
    pub fd_reduction_pct: f64,
    pub cpu_reduction_pct: f64,
    /// Longest stall of a critical client beyond one generator period.
    pub interruption_seconds: f64,
    /// Connections refused by each IOC in the direct variant.
    pub direct_refusals: Vec<u64>,
}

impl RunReport {
    /// A report with no samples.
    pub fn empty(spec: &ScenarioSpec) -> Self {
        RunReport {
            spec: spec.clone(),
            direct: VariantReport::default(),
            gateway: VariantReport::default(),
            failure: None,
            fd_reduction_pct: 0.0,
            cpu_reduction_pct: 0.0,
            interruption_seconds: 0.0,
            direct_refusals: vec![0; spec.iocs],
        }
    }

    /// Named pass/fail checks over the report.
    pub fn checks(&self) -> Vec<(String, bool)> {
        let s = &self.spec;
        let mut out = Vec::new();
        if let Some(last) = self.gateway.last() {
            let expected =
                usize::from(s.gateway_clients() > 0) + s.direct_public + s.critical_clients;
            out.push((
                format!("gateway variant: {expected} connection(s) per IOC"),
                last.iocs.iter().all(|i| i.connections == expected),
            ));
        }
        out.push((
            "alive_pvs >= active_pvs in every sample".into(),
            self.gateway
                .samples
                .iter()
                .filter_map(|x| x.gateway)
                .all(|g| g.alive_pvs >= g.active_pvs),
        ));
        if s.gateway_clients() >= 3 && s.direct_public == 0 {
            out.push(("fd reduction >= 25%".into(), self.fd_reduction_pct >= 25.0));
        }
        if s.gateway_clients() >= 2 && s.direct_public == 0 && s.critical_clients == 0 {
            out.push((
                "cpu reduction >= 20%".into(),
                self.cpu_reduction_pct >= 20.0,
            ));
        }
        out.push((
            "critical clients uninterrupted".into(),
            self.interruption_seconds == 0.0,
        ));
        if let Some(f) = &self.failure {
            out.push((
                "critical logs identical to no-failure run".into(),
                f.critical_identical,
            ));
            out.push((
                "gateway clients see INVALID within 10 s".into(),
                f.invalid_latency_ms
                    .iter()
                    .all(|l| l.is_some_and(|ms| ms <= DEAD_AFTER_MS)),
            ));
            if f.restart_at.is_some() {
                out.push((
                    "gateway clients recover after restart".into(),
                    f.recovered.iter().all(|r| *r),
                ));
            }
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.checks().iter().all(|(_, ok)| *ok)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Direct,
    Gateway,
}

struct ClientSlot {
    id: NodeId,
    log: ClientLog,
    ops: BTreeMap<u64, String>,
}

const GATEWAY_ENDPOINT: &str = "gateway:5064";

fn ioc_endpoint(i: usize) -> Endpoint {
    Endpoint::new(format!("ioc{i}:5064"))
}

fn open_acf() -> AccessSecurityConfig {
    parse_acf("ASG(DEFAULT){RULE(1,READ)}").expect("static ACF parses")
}

fn gateway_config(spec: &ScenarioSpec) -> GatewayConfig {
    GatewayConfig {
        upstreams: (0..spec.iocs).map(ioc_endpoint).collect(),
        listen: Endpoint::new(GATEWAY_ENDPOINT),
        hold_seconds: spec.hold_seconds,
        identity: Identity::new("gwrun", "gateway"),
        ..GatewayConfig::default()
    }
}

fn new_gateway(spec: &ScenarioSpec, now: Millis) -> Gateway {
    Gateway::new(&gateway_config(spec), open_acf(), now)
}

fn run_variant(
    spec: &ScenarioSpec,
    mode: Mode,
    failure: Option<(Millis, Option<Millis>)>,
) -> VariantReport {
    let mut net = SimNet::new();
    let iocs: Vec<NodeId> = (0..spec.iocs)
        .map(|i| {
            let cfg = IocConfig {
                name: format!("ioc{i}"),
                capacity: spec.capacity,
                fd_limit: spec.fd_limit,
                epoch_ns: 0,
                seed: spec.seed,
                window_secs: 10,
            };
            let ioc = IocServer::new(spec.records(i), open_acf(), cfg, 0);
            net.add(format!("ioc{i}"), ioc, Some(ioc_endpoint(i)))
        })
        .collect();
    let gateway = (mode == Mode::Gateway && spec.gateway_clients() > 0).then(|| {
        net.add(
            "gateway",
            new_gateway(spec, 0),
            Some(Endpoint::new(GATEWAY_ENDPOINT)),
        )
    });
    let direct_list = AddressList::new((0..spec.iocs).map(ioc_endpoint).collect(), false);
    let gateway_list = AddressList::new(vec![Endpoint::new(GATEWAY_ENDPOINT)], false);
    let pvs = spec.all_pvs();

    let mut clients = Vec::new();
    let roles = (0..spec.critical_clients)
        .map(|k| (Role::Critical, k))
        .chain((0..spec.clients).map(|k| (Role::Public, k)));
    for (role, k) in roles {
        let via_gateway = role == Role::Public && gateway.is_some() && k >= spec.direct_public;
        let (name, identity) = match role {
            Role::Critical => (
                format!("daq{k}"),
                Identity::new(format!("daq{k}"), format!("daq{k}")),
            ),
            Role::Public => (
                format!("ws{k}"),
                Identity::new(format!("user{k}"), format!("ws{k}")),
            ),
        };
        let list = if via_gateway {
            &gateway_list
        } else {
            &direct_list
        };
        let Ok(list) = list.clone() else {
            // no IOCs: nothing to monitor
            continue;
        };
        let id = net.add(name.clone(), ClientCore::new(list, identity, 0), None);
        let ops = net.with_client(id, |c, now| {
            pvs.iter()
                .map(|pv| {
                    let op = if via_gateway {
                        c.monitor_with_retry(pv, RESUBSCRIBE_MS, now)
                    } else {
                        c.monitor(pv, now)
                    };
                    (op, pv.clone())
                })
                .collect()
        });
        clients.push(ClientSlot {
            id,
            ops,
            log: ClientLog {
                name,
                role,
                via_gateway,
                deliveries: Vec::new(),
                ended: Vec::new(),
            },
        });
    }

    let mut samples = Vec::new();
    let mut gateway_up = gateway.is_some();
    for t in 0..=spec.duration_secs {
        let now = t * 1000;
        net.run_until(now);
        if let (Some(gw), Some((kill, restart))) = (gateway, failure) {
            if now == kill {
                net.kill(gw);
                gateway_up = false;
            }
            if restart == Some(now) {
                net.restart(gw, new_gateway(spec, now));
                gateway_up = true;
            }
        }
        for slot in &mut clients {
            collect(&mut net, slot);
        }
        samples.push(Sample {
            t,
            iocs: iocs.iter().map(|&i| net.ioc(i).stats(now)).collect(),
            gateway: gateway
                .filter(|_| gateway_up)
                .map(|g| net.gateway(g).stats(now)),
        });
    }
    VariantReport {
        samples,
        clients: clients.into_iter().map(|c| c.log).collect(),
        frames_delivered: net.frames_delivered(),
    }
}

fn collect(net: &mut SimNet, slot: &mut ClientSlot) {
    for ev in net.client_events(slot.id) {
        match ev {
            ClientEvent::Monitor { pv, value, at, .. } => {
                slot.log.deliveries.push(Delivery { at, pv, value })
            }
            ClientEvent::MonitorEnded {
                op,
                pv,
                error,
                at,
                retry_at,
            } => {
                slot.log.ended.push((at, pv, error.to_string()));
                if retry_at.is_none() {
                    slot.ops.remove(&op);
                }
            }
            _ => {}
        }
    }
}

fn mean_reduction(direct: &[IocStats], gateway: &[IocStats], f: impl Fn(&IocStats) -> f64) -> f64 {
    let parts: Vec<f64> = direct
        .iter()
        .zip(gateway)
        .filter(|(d, _)| f(d) > 0.0)
        .map(|(d, g)| (f(d) - f(g)) / f(d))
        .collect();
    if parts.is_empty() {
        return 0.0;
    }
    100.0 * parts.iter().sum::<f64>() / parts.len() as f64
}

fn interruption(logs: &VariantReport, period_ms: u64) -> f64 {
    logs.critical_logs()
        .map(|c| c.max_gap().saturating_sub(period_ms))
        .max()
        .unwrap_or(0) as f64
        / 1000.0
}

fn assemble(spec: &ScenarioSpec, direct: VariantReport, gateway: VariantReport) -> RunReport {
    let (fd, cpu) = match (direct.last(), gateway.last()) {
        (Some(d), Some(g)) => (
            mean_reduction(&d.iocs, &g.iocs, |s| s.fds as f64),
            mean_reduction(&d.iocs, &g.iocs, |s| s.cpu_proxy),
        ),
        _ => (0.0, 0.0),
    };
    let direct_refusals = direct
        .last()
        .map(|s| s.iocs.iter().map(|i| i.refused_connections).collect())
        .unwrap_or_else(|| vec![0; spec.iocs]);
    RunReport {
        spec: spec.clone(),
        interruption_seconds: interruption(&gateway, spec.period_ms),
        direct,
        gateway,
        failure: None,
        fd_reduction_pct: fd,
        cpu_reduction_pct: cpu,
        direct_refusals,
    }
}

/// Runs the direct and gateway variants of `spec` with the same seed.
pub fn run_topology(spec: &ScenarioSpec) -> Result<RunReport, HarnessError> {
    spec.validate()?;
    let direct = run_variant(spec, Mode::Direct, None);
    let gateway = run_variant(spec, Mode::Gateway, None);
    let report = assemble(spec, direct, gateway);
    if report.direct_refusals.iter().any(|&r| r > 0) {
        log::warn!(
            "direct variant hit the fd limit: refusals per IOC {:?}",
            report.direct_refusals
        );
    }
    Ok(report)
}

/// Runs the scenario, then reruns the gateway variant with the gateway
/// killed at `kill_at` and optionally restarted.
pub fn inject_gateway_failure(
    spec: &ScenarioSpec,
    kill_at: Millis,
    restart_at: Option<Millis>,
) -> Result<RunReport, HarnessError> {
    spec.validate()?;
    if spec.critical_clients == 0 || spec.gateway_clients() == 0 {
        return Err(HarnessError::Scenario(
            "failure injection needs a critical client and a gateway client".into(),
        ));
    }
    if !kill_at.is_multiple_of(1000)
        || restart_at.is_some_and(|r| !r.is_multiple_of(1000) || r <= kill_at)
    {
        return Err(HarnessError::Scenario(
            "kill and restart times must be whole seconds, restart after kill".into(),
        ));
    }
    let mut report = run_topology(spec)?;
    let run = run_variant(spec, Mode::Gateway, Some((kill_at, restart_at)));
    let baseline: Vec<Vec<u8>> = report
        .gateway
        .critical_logs()
        .map(ClientLog::bytes)
        .collect();
    let failed: Vec<Vec<u8>> = run.critical_logs().map(ClientLog::bytes).collect();
    let invalid_latency_ms = run
        .gateway_logs()
        .map(|c| c.first_invalid_after(kill_at).map(|t| t - kill_at))
        .collect();
    let recovered = run
        .gateway_logs()
        .map(|c| restart_at.is_some_and(|r| c.valid_after(r)))
        .collect();
    report.interruption_seconds = interruption(&run, spec.period_ms);
    report.failure = Some(FailureReport {
        kill_at,
        restart_at,
        critical_identical: baseline == failed,
        invalid_latency_ms,
        recovered,
        run,
    });
    Ok(report)
}

pub fn csv_header(iocs: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "alive_pvs", "active_pvs", "event_rate", "post_rate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..iocs).map(|i| format!("ioc{i}_fds")));
    h.extend((0..iocs).map(|i| format!("ioc{i}_cpu_proxy")));
    h
}

/// Writes the gateway variant's samples, one row per second.
pub fn emit_csv(report: &RunReport, path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(csv_header(report.spec.iocs))?;
    for s in &report.gateway.samples {
        let g = s.gateway.unwrap_or_default();
        let mut row = vec![
            s.t.to_string(),
            g.alive_pvs.to_string(),
            g.active_pvs.to_string(),
            g.event_rate.to_string(),
            g.post_rate.to_string(),
        ];
        row.extend(s.iocs.iter().map(|i| i.fds.to_string()));
        row.extend(s.iocs.iter().map(|i| i.cpu_proxy.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Renders `columns` of a CSV file against its `t` column as an SVG line
/// chart. Output depends only on the input bytes.
pub fn render_chart(
    csv_path: &Path,
    out_path: &Path,
    columns: &[&str],
) -> Result<(), HarnessError> {
    let mut rd = csv::Reader::from_path(csv_path)?;
    let headers = rd.headers()?.clone();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::MissingColumn(name.to_string()))
    };
    let t_col = index("t")?;
    let cols = columns
        .iter()
        .map(|c| index(c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut ts = Vec::new();
    let mut series: Vec<Vec<f64>> = vec![Vec::new(); cols.len()];
    for rec in rd.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, HarnessError> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| HarnessError::Scenario(format!("{}: {e}", &headers[i])))
        };
        ts.push(num(t_col)?);
        for (s, &c) in series.iter_mut().zip(&cols) {
            s.push(num(c)?);
        }
    }
    let svg = chart_svg(&ts, columns, &series);
    std::fs::write(out_path, svg)?;
    Ok(())
}

fn chart_svg(ts: &[f64], names: &[&str], series: &[Vec<f64>]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 400.0;
    const L: f64 = 70.0;
    const R: f64 = 160.0;
    const T: f64 = 20.0;
    const B: f64 = 40.0;
    let (t0, t1) = bounds(ts.iter().copied());
    let (mut y0, mut y1) = bounds(series.iter().flatten().copied());
    y0 = y0.min(0.0);
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let x = |t: f64| L + (t - t0) / (t1 - t0) * (W - L - R);
    let y = |v: f64| H - B - (v - y0) / (y1 - y0) * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{L}" y1="{}" x2="{}" y2="{}"/><line x1="{L}" y1="{T}" x2="{L}" y2="{}"/></g>"#,
        H - B,
        W - R,
        H - B,
        H - B
    );
    let _ = writeln!(
        s,
        r#"<text x="{L}" y="{}" text-anchor="middle">{}</text><text x="{}" y="{}" text-anchor="middle">{}</text><text x="{}" y="{}" text-anchor="middle">t (s)</text>"#,
        H - B + 16.0,
        fmt_num(t0),
        W - R,
        H - B + 16.0,
        fmt_num(t1),
        (L + W - R) / 2.0,
        H - 6.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text><text x="{}" y="{}" text-anchor="end">{}</text>"#,
        L - 6.0,
        H - B,
        fmt_num(y0),
        L - 6.0,
        T + 4.0,
        fmt_num(y1)
    );
    for (k, (name, vals)) in names.iter().zip(series).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = ts
            .iter()
            .zip(vals)
            .map(|(&t, &v)| format!("{:.2},{:.2}", x(t), y(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-column="{name}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = T + 10.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<g class="legend"><line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{name}</text></g>"#,
            W - R + 12.0,
            W - R + 32.0,
            W - R + 38.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi <= lo {
        return (lo, lo + 1.0);
    }
    (lo, hi)
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}
