//! Acceptance checks. Runs without the libtest harness so that every
//! criterion prints one PASS/FAIL line even when the others succeed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use pvgate::acf::{augment_for_gateway, merge_acf, parse_acf, Level, MergeMode};
use pvgate::client::{ClientError, ClientEvent};
use pvgate::gateway::{CacheEntry, CacheEvent, CacheState, Subscriber};
use pvgate::harness::{
    emit_csv, inject_gateway_failure, render_chart, run_topology, RunReport, ScenarioSpec,
};
use pvgate::iocsim::{IocConfig, BASE_FDS};
use pvgate::node::ConnId;
use pvgate::proto::{
    decode_frame, decode_value, encode_frame, encode_value, Command, Identity, Message, Value,
};
use pvgate::sim::SimNet;

fn main() {
    let criteria: Vec<(&str, &str, fn())> = vec![
        ("AC1", "fan-in: one IOC connection, fds 5 vs 4+M", ac1),
        ("AC2", "cpu proxy reduction on the standard scenario", ac2),
        ("AC3", "cache hold window lifecycle", ac3),
        ("AC4", "stats identities", ac4),
        ("AC5", "security composition matrix", ac5),
        ("AC6", "failure independence", ac6),
        ("AC7", "duplicate disambiguation", ac7),
        ("AC8", "protocol and ACF property suites", ac8),
        ("AC9", "chart pipeline", ac9),
    ];
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.starts_with("AC"))
        .collect();
    let mut failed = 0;
    for (tag, what, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == tag) {
            continue;
        }
        let start = Instant::now();
        let ok = catch_unwind(AssertUnwindSafe(f)).is_ok();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "{tag} {what} ... {} ({secs:.1}s)",
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

fn standard_report() -> &'static RunReport {
    static REPORT: std::sync::OnceLock<RunReport> = std::sync::OnceLock::new();
    REPORT.get_or_init(|| run_topology(&ScenarioSpec::standard()).expect("standard scenario runs"))
}

fn ac1() {
    for m in [1usize, 5, 20, 50] {
        let spec = ScenarioSpec {
            iocs: 1,
            pvs_per_ioc: 10,
            clients: m,
            duration_secs: 12,
            ..ScenarioSpec::standard()
        };
        let r = run_topology(&spec).unwrap();
        let g = &r.gateway.last().unwrap().iocs[0];
        let d = &r.direct.last().unwrap().iocs[0];
        assert_eq!(g.connections, 1, "M={m}: gateway variant connections");
        assert_eq!(g.fds, 5, "M={m}: gateway variant fds");
        assert_eq!(d.fds, BASE_FDS + m, "M={m}: direct variant fds");
        let expected = 100.0 * (1.0 - 5.0 / (4.0 + m as f64));
        assert!(
            (r.fd_reduction_pct - expected).abs() < 1e-9,
            "M={m}: reduction {} vs {expected}",
            r.fd_reduction_pct
        );
        if m >= 2 {
            assert!(r.fd_reduction_pct >= 25.0);
        }
    }
}

fn ac2() {
    let spec = ScenarioSpec::standard();
    let r = standard_report();
    // Linear load model per IOC: every client connection carries one event per
    // PV per period plus an echo request and reply every 5 s; the gateway
    // variant has a single such connection.
    let per_conn = spec.pvs_per_ioc as f64 * 1000.0 / spec.period_ms as f64 + 2.0 / 5.0;
    let direct = spec.clients as f64 * per_conn / spec.capacity;
    let gateway = per_conn / spec.capacity;
    let expected = 100.0 * (direct - gateway) / direct;
    for (i, s) in r.direct.last().unwrap().iocs.iter().enumerate() {
        assert!(
            (s.cpu_proxy - direct).abs() <= 0.01 * direct,
            "direct ioc{i} {}",
            s.cpu_proxy
        );
    }
    for (i, s) in r.gateway.last().unwrap().iocs.iter().enumerate() {
        assert!(
            (s.cpu_proxy - gateway).abs() <= 0.01 * gateway,
            "gateway ioc{i} {}",
            s.cpu_proxy
        );
    }
    assert!(r.cpu_reduction_pct >= 20.0);
    assert!(
        (r.cpu_reduction_pct - expected).abs() <= 1.0,
        "reduction {} vs {expected}",
        r.cpu_reduction_pct
    );
}

fn ac3() {
    let hold_s = 7200;
    let mut net = SimNet::new();
    let ioc = net.add(
        "ioc",
        ioc("ioc", &db("hv", 1, "SINE", 5.0)),
        Some(ep("ioc:5064")),
    );
    let gw = net.add(
        "gw",
        gateway(&["ioc:5064"], OPEN_ACF, hold_s),
        Some(ep("gw:5064")),
    );
    let c = add_client(&mut net, "c", &["gw:5064"], false, id("alice", "ws1"));
    let upstream_setup = |net: &SimNet| {
        let cap = net.captured();
        (
            count_frames(cap, gw, ioc, Command::Search),
            count_frames(cap, gw, ioc, Command::CreateChan),
        )
    };

    net.start_capture();
    let op = net.with_client(c, |c, now| c.monitor("hv0", now));
    assert!(matches!(
        wait_event(&mut net, c, op, 2000),
        ClientEvent::Monitor { .. }
    ));
    assert_eq!(upstream_setup(&net), (1, 1), "first subscription");
    net.with_client(c, |c, now| c.cancel(op, now));
    net.run_for(1000);
    assert_eq!(
        net.gateway(gw).entry("hv0").unwrap().state,
        CacheState::Inactive
    );

    // resubscribe well inside the hold window
    net.run_for(60_000);
    net.start_capture();
    let op = net.with_client(c, |c, now| c.monitor("hv0", now));
    assert!(matches!(
        wait_event(&mut net, c, op, 2000),
        ClientEvent::Monitor { .. }
    ));
    assert_eq!(upstream_setup(&net), (0, 0), "resubscribe within hold");
    net.with_client(c, |c, now| c.cancel(op, now));

    // let the hold window lapse
    net.run_for(hold_s * 1000 + 2000);
    assert!(
        net.gateway(gw).entry("hv0").is_none(),
        "entry evicted after hold"
    );
    net.start_capture();
    let op = net.with_client(c, |c, now| c.monitor("hv0", now));
    assert!(matches!(
        wait_event(&mut net, c, op, 2000),
        ClientEvent::Monitor { .. }
    ));
    assert_eq!(upstream_setup(&net), (1, 1), "resubscribe after expiry");

    // the pure state machine at the window edges
    let hold = hold_s * 1000;
    let sub = Subscriber {
        conn: ConnId(1),
        cid: 1,
    };
    let (e, _) = CacheEntry::new("hv0")
        .transition(CacheEvent::ClientSubscribe(sub), 0, hold)
        .unwrap();
    let (e, _) = e
        .transition(CacheEvent::UpstreamConnected, 0, hold)
        .unwrap();
    let (e, _) = e
        .transition(CacheEvent::UpstreamEvent(double(1.0)), 0, hold)
        .unwrap();
    let t0 = 1_000;
    let (e, _) = e
        .transition(CacheEvent::ClientUnsubscribe(sub), t0, hold)
        .unwrap();
    assert_eq!(e.state, CacheState::Inactive);
    let (kept, _) = e
        .clone()
        .transition(CacheEvent::Tick, t0 + 7199 * 1000, hold)
        .unwrap();
    assert_eq!(kept.state, CacheState::Inactive);
    let (gone, _) = e
        .transition(CacheEvent::Tick, t0 + 7201 * 1000, hold)
        .unwrap();
    assert_eq!(gone.state, CacheState::Evicted);
}

fn ac4() {
    let mut net = SimNet::new();
    net.add(
        "ioc",
        ioc("ioc", &db("pv", 10, "SINE", 5.0)),
        Some(ep("ioc:5064")),
    );
    let gw = net.add(
        "gw",
        gateway(&["ioc:5064"], OPEN_ACF, 7200),
        Some(ep("gw:5064")),
    );
    let mut group_b = Vec::new();
    for k in 0..8 {
        let c = add_client(
            &mut net,
            &format!("c{k}"),
            &["gw:5064"],
            false,
            id(&format!("u{k}"), "ws1"),
        );
        let range = if k < 4 { 0..5 } else { 5..10 };
        net.with_client(c, |c, now| {
            for i in range {
                c.monitor(&format!("pv{i}"), now);
            }
        });
        if k >= 4 {
            group_b.push(c);
        }
    }
    net.run_until(15_000);
    let s = net.gateway(gw).stats(net.now());
    assert!(
        (s.event_rate - 100.0).abs() <= 10.0,
        "event_rate {}",
        s.event_rate
    );
    assert!(
        (s.post_rate - 400.0).abs() <= 40.0,
        "post_rate {}",
        s.post_rate
    );
    assert_eq!((s.alive_pvs, s.active_pvs), (10, 10));

    for c in group_b {
        net.with_client(c, |c, now| c.disconnect(now));
    }
    net.run_for(15_000);
    let s = net.gateway(gw).stats(net.now());
    let held = net
        .gateway(gw)
        .entries()
        .filter(|e| e.state == CacheState::Inactive)
        .count();
    assert_eq!(held, 5);
    assert_eq!(s.alive_pvs - s.active_pvs, held);
    assert!(
        (s.post_rate - 200.0).abs() <= 20.0,
        "post_rate after {}",
        s.post_rate
    );
}

fn ac5() {
    let gw_id = Identity::new("gwrun", "gwhost");
    let base = parse_acf(DCH_ACF).unwrap();
    let augmented = augment_for_gateway(&base, &gw_id);
    assert!(augmented.allows("dch", &gw_id, Level::Write));
    assert!(!base.allows("dch", &gw_id, Level::Write));

    let dbtext = "pv dch:hv DOUBLE dch CONST 1000 2.5\n";
    for augment in [true, false] {
        for user in ["alice", "bob"] {
            let ioc_acf = if augment {
                augmented.render()
            } else {
                base.render()
            };
            let mut net = SimNet::new();
            let ioc = net.add(
                "ioc",
                ioc_with("ioc", dbtext, &ioc_acf, IocConfig::default()),
                Some(ep("ioc:5064")),
            );
            let gw = net.add(
                "gw",
                gateway(&["ioc:5064"], DCH_ACF, 7200),
                Some(ep("gw:5064")),
            );
            net.start_capture();
            let c = add_client(&mut net, "c", &["gw:5064"], false, id(user, "ws1"));
            let op = net.with_client(c, |c, now| c.get("dch:hv", now));
            assert!(matches!(
                wait_event(&mut net, c, op, 3000),
                ClientEvent::GetDone { result: Ok(_), .. }
            ));
            let setup = net.take_capture();

            net.start_capture();
            let op = net.with_client(c, |c, now| c.put("dch:hv", double(7.0), now));
            let ev = wait_event(&mut net, c, op, 3000);
            let during = net.take_capture();
            let ClientEvent::PutDone { result, .. } = ev else {
                panic!("{ev:?}")
            };
            let label = format!("({user}, augmented={augment})");
            match (user, augment) {
                ("alice", true) => {
                    assert_eq!(result, Ok(()), "{label}");
                    assert_eq!(
                        count_frames(&during, ioc, gw, Command::WriteOk),
                        1,
                        "{label}"
                    );
                }
                ("alice", false) => {
                    assert_eq!(result, Err(ClientError::WriteDenied), "{label}");
                    assert_eq!(count_frames(&during, gw, ioc, Command::Write), 1, "{label}");
                    assert_eq!(
                        count_frames(&during, ioc, gw, Command::WriteDenied),
                        1,
                        "{label}"
                    );
                }
                _ => {
                    assert_eq!(result, Err(ClientError::WriteDenied), "{label}");
                    assert_eq!(frames_between(&during, gw, ioc), 0, "{label}");
                }
            }
            for f in setup
                .iter()
                .chain(&during)
                .filter(|f| f.from == gw && f.to == ioc)
            {
                if let Ok(Message::CreateChan { identity, .. }) = Message::from_frame(&f.frame) {
                    assert_eq!(identity, gw_id, "{label}");
                }
            }
            assert!(count_frames(&setup, gw, ioc, Command::CreateChan) >= 1);
            let expected = if user == "alice" && augment { 7.0 } else { 2.5 };
            assert_eq!(
                net.ioc(ioc).record("dch:hv").unwrap().current.value,
                Value::Double(expected),
                "{label}"
            );
        }
    }
}

fn ac6() {
    let spec = ScenarioSpec {
        iocs: 1,
        pvs_per_ioc: 10,
        clients: 5,
        critical_clients: 2,
        duration_secs: 30,
        ..ScenarioSpec::standard()
    };
    let r = inject_gateway_failure(&spec, 10_000, Some(22_000)).unwrap();
    let f = r.failure.as_ref().unwrap();
    assert_eq!(f.run.critical_logs().count(), 2);
    assert_eq!(f.run.gateway_logs().count(), 5);
    assert!(f.run.critical_logs().all(|l| !l.deliveries.is_empty()));
    assert!(f.critical_identical);
    assert_eq!(r.interruption_seconds, 0.0);
    for (k, l) in f.invalid_latency_ms.iter().enumerate() {
        assert!(
            l.is_some_and(|ms| ms <= 10_000),
            "gateway client {k}: {l:?}"
        );
    }
    assert!(f.recovered.iter().all(|r| *r), "{:?}", f.recovered);
}

fn ac7() {
    let setup = |net: &mut SimNet| {
        net.add(
            "ioc",
            ioc("ioc", "pv x DOUBLE DEFAULT CONST 1000 1\n"),
            Some(ep("ioc:5064")),
        );
        net.add(
            "gw",
            gateway(&["ioc:5064"], OPEN_ACF, 7200),
            Some(ep("gw:5064")),
        );
    };
    let mut net = SimNet::new();
    setup(&mut net);
    let c = add_client(
        &mut net,
        "strict",
        &["ioc:5064", "gw:5064"],
        true,
        id("alice", "ws1"),
    );
    let op = net.with_client(c, |c, now| c.resolve("x", now));
    match wait_event(&mut net, c, op, 5000) {
        ClientEvent::Resolved {
            result: Err(ClientError::DuplicatePv { .. }),
            ..
        } => {}
        e => panic!("strict: {e:?}"),
    }

    let mut hits = 0;
    for trial in 0..100u64 {
        let mut net = SimNet::new();
        setup(&mut net);
        // stagger the start so the gateway cache is cold or warm
        net.run_for(trial * 37 % 3000);
        if trial % 2 == 1 {
            let warm = add_client(&mut net, "warm", &["gw:5064"], false, id("bob", "ws2"));
            let op = net.with_client(warm, |c, now| c.get("x", now));
            wait_event(&mut net, warm, op, 5000);
        }
        let c = add_client(
            &mut net,
            "c",
            &["ioc:5064", "gw:5064"],
            false,
            id("alice", "ws1"),
        );
        let op = net.with_client(c, |c, now| c.resolve("x", now));
        if let ClientEvent::Resolved { result: Ok(e), .. } = wait_event(&mut net, c, op, 5000) {
            if e == ep("ioc:5064") {
                hits += 1;
            }
        }
    }
    assert_eq!(hits, 100);
}

fn run<S: proptest::strategy::Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    if let Err(e) = runner.run(&strategy, test) {
        panic!("{e}");
    }
}

fn ac8() {
    run(10_000, frame(), |f| {
        let bytes = encode_frame(&f).unwrap();
        let (back, rest) = decode_frame(&bytes).unwrap();
        proptest::prop_assert_eq!(back, f);
        proptest::prop_assert!(rest.is_empty());
        Ok(())
    });
    run(10_000, channel_value(), |v| {
        let bytes = encode_value(&v).unwrap();
        proptest::prop_assert_eq!(decode_value(&bytes).unwrap(), v);
        Ok(())
    });

    let check = |m: &AcfModel| -> Result<(), TestCaseError> {
        let cfg = m.parse();
        for (asg, user, host, write) in grid() {
            let level = if write { Level::Write } else { Level::Read };
            proptest::prop_assert_eq!(
                cfg.allows(asg, &Identity::new(user, host), level),
                m.allows(asg, user, host, write),
                "{} {}@{} write={}\n{}",
                asg,
                user,
                host,
                write,
                m.text()
            );
        }
        Ok(())
    };
    run(500, acf_model(), |m| check(&m));

    run(1_000, (acf_model(), acf_model()), |(a, b)| {
        let merged = merge_acf(&[a.parse(), b.parse()], MergeMode::Union).unwrap();
        for (asg, user, host, write) in grid() {
            if a.allows(asg, user, host, write) || b.allows(asg, user, host, write) {
                let level = if write { Level::Write } else { Level::Read };
                proptest::prop_assert!(
                    merged.allows(asg, &Identity::new(user, host), level),
                    "{} {}@{} write={}\n--- a\n{}--- b\n{}",
                    asg,
                    user,
                    host,
                    write,
                    a.text(),
                    b.text()
                );
            }
        }
        Ok(())
    });
}

fn ac9() {
    let r = standard_report();
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("run.csv");
    emit_csv(r, &csv_path).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..3], &["t", "alive_pvs", "active_pvs"]);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 31);

    let a = dir.path().join("a.svg");
    let b = dir.path().join("b.svg");
    render_chart(&csv_path, &a, &["alive_pvs", "active_pvs"]).unwrap();
    render_chart(&csv_path, &b, &["alive_pvs", "active_pvs"]).unwrap();
    let svg = std::fs::read(&a).unwrap();
    assert_eq!(svg, std::fs::read(&b).unwrap());

    let svg = String::from_utf8(svg).unwrap();
    for col in ["alive_pvs", "active_pvs"] {
        let ys = polyline_ys(&svg, col);
        assert_eq!(ys.len(), 31, "{col}");
        // skip the connect-up seconds, then the line must be flat to a pixel
        let settled = &ys[2..];
        let lo = settled.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = settled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo <= 1.0, "{col}: y spread {lo}..{hi}");
    }
}

fn polyline_ys(svg: &str, column: &str) -> Vec<f64> {
    let marker = format!("data-column=\"{column}\"");
    let line = svg
        .lines()
        .find(|l| l.contains("<polyline") && l.contains(&marker))
        .unwrap_or_else(|| panic!("no polyline for {column}"));
    let points = line
        .split("points=\"")
        .nth(1)
        .unwrap()
        .split('"')
        .next()
        .unwrap();
    points
        .split_whitespace()
        .map(|p| p.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}
