mod common;

use common::*;
use pvgate::client::{AddressList, ClientError, ClientEvent};
use pvgate::iocsim::IocConfig;
use pvgate::proto::{Severity, Value};
use pvgate::sim::{NodeId, SimNet};

fn one_ioc(db: &str) -> (SimNet, NodeId) {
    let mut net = SimNet::new();
    let i = net.add("ioc1", ioc("ioc1", db), Some(ep("ioc1:5064")));
    (net, i)
}

fn monitor_values(events: &[ClientEvent]) -> Vec<(u64, pvgate::proto::ChannelValue)> {
    events
        .iter()
        .filter_map(|e| match e {
            ClientEvent::Monitor { at, value, .. } => Some((*at, value.clone())),
            _ => None,
        })
        .collect()
}

#[test]
fn get_const() {
    let (mut net, _) = one_ioc("pv k DOUBLE DEFAULT CONST 1000 3\n");
    let c = add_client(&mut net, "c", &["ioc1:5064"], false, id("u", "h"));
    let op = net.with_client(c, |c, now| c.get("k", now));
    match wait_event(&mut net, c, op, 3000) {
        ClientEvent::GetDone {
            result: Ok(v), pv, ..
        } => {
            assert_eq!(pv, "k");
            assert_eq!(v.value, Value::Double(3.0));
        }
        e => panic!("{e:?}"),
    }
    net.run_for(100);
    assert!(!net.client(c).has_pending());
}

#[test]
fn monitor_counter_for_one_second() {
    let (mut net, _) = one_ioc("pv n INT32 DEFAULT COUNTER 100 0\n");
    let c = add_client(&mut net, "c", &["ioc1:5064"], false, id("u", "h"));
    let op = net.with_client(c, |c, now| c.monitor("n", now));
    // first delivery is the current value, then count one second from it
    let ClientEvent::Monitor { at: start, .. } = wait_event(&mut net, c, op, 2000) else {
        panic!()
    };
    net.run_until(start + 1000);
    let got = monitor_values(&net.client_events(c));
    assert!((9..=11).contains(&got.len()), "{}", got.len());
    let ints: Vec<i32> = got
        .iter()
        .map(|(_, v)| match v.value {
            Value::Int32(i) => i,
            ref other => panic!("{other:?}"),
        })
        .collect();
    assert!(ints.windows(2).all(|w| w[0] < w[1]), "{ints:?}");
}

#[test]
fn put_as_bob_is_denied() {
    let mut net = SimNet::new();
    net.add(
        "ioc1",
        ioc_with(
            "ioc1",
            "pv dch:hv DOUBLE dch CONST 1000 1\n",
            DCH_ACF,
            IocConfig::default(),
        ),
        Some(ep("ioc1:5064")),
    );
    let c = add_client(&mut net, "c", &["ioc1:5064"], false, id("bob", "anyhost"));
    let op = net.with_client(c, |c, now| c.put("dch:hv", double(5.0), now));
    let ClientEvent::PutDone { result, .. } = wait_event(&mut net, c, op, 3000) else {
        panic!()
    };
    let err = result.unwrap_err();
    assert_eq!(err, ClientError::WriteDenied);
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn not_found_everywhere() {
    let mut net = SimNet::new();
    net.add(
        "ioc1",
        ioc("ioc1", "pv a DOUBLE DEFAULT CONST 1 1\n"),
        Some(ep("ioc1:5064")),
    );
    net.add(
        "ioc2",
        ioc("ioc2", "pv b DOUBLE DEFAULT CONST 1 1\n"),
        Some(ep("ioc2:5064")),
    );
    let c = add_client(
        &mut net,
        "c",
        &["ioc1:5064", "ioc2:5064", "ghost:5064"],
        true,
        id("u", "h"),
    );
    let op = net.with_client(c, |c, now| c.resolve("zzz", now));
    match wait_event(&mut net, c, op, 5000) {
        ClientEvent::Resolved { result: Err(e), .. } => {
            assert_eq!(e, ClientError::NotFound("zzz".into()));
            assert_eq!(e.exit_code(), 2);
        }
        e => panic!("{e:?}"),
    }
}

#[test]
fn duplicate_lists_every_responder() {
    let mut net = SimNet::new();
    net.add(
        "ioc1",
        ioc("ioc1", "pv a DOUBLE DEFAULT CONST 1 1\n"),
        Some(ep("ioc1:5064")),
    );
    net.add(
        "ioc2",
        ioc("ioc2", "pv a DOUBLE DEFAULT CONST 1 2\n"),
        Some(ep("ioc2:5064")),
    );
    let strict = add_client(
        &mut net,
        "s",
        &["ioc2:5064", "ioc1:5064"],
        true,
        id("u", "h"),
    );
    let op = net.with_client(strict, |c, now| c.resolve("a", now));
    match wait_event(&mut net, strict, op, 5000) {
        ClientEvent::Resolved {
            result: Err(ClientError::DuplicatePv { pv, endpoints }),
            ..
        } => {
            assert_eq!(pv, "a");
            assert_eq!(endpoints, vec![ep("ioc2:5064"), ep("ioc1:5064")]);
        }
        e => panic!("{e:?}"),
    }
    // without strict mode list order wins, even when the first entry is slower to ask
    let lax = add_client(
        &mut net,
        "l",
        &["ioc2:5064", "ioc1:5064"],
        false,
        id("u", "h"),
    );
    let op = net.with_client(lax, |c, now| c.get("a", now));
    match wait_event(&mut net, lax, op, 5000) {
        ClientEvent::GetDone { result: Ok(v), .. } => assert_eq!(v.value, Value::Double(2.0)),
        e => panic!("{e:?}"),
    }
}

#[test]
fn resolution_is_repeatable() {
    let mut net = SimNet::new();
    for n in 1..=3 {
        net.add(
            format!("ioc{n}"),
            ioc(&format!("ioc{n}"), "pv shared DOUBLE DEFAULT CONST 1 1\n"),
            Some(ep(&format!("ioc{n}:5064"))),
        );
    }
    let c = add_client(
        &mut net,
        "c",
        &["ioc3:5064", "ioc1:5064", "ioc2:5064"],
        false,
        id("u", "h"),
    );
    for _ in 0..100 {
        let op = net.with_client(c, |c, now| c.resolve("shared", now));
        match wait_event(&mut net, c, op, 5000) {
            ClientEvent::Resolved { result: Ok(e), .. } => assert_eq!(e, ep("ioc3:5064")),
            e => panic!("{e:?}"),
        }
    }
}

#[test]
fn nothing_after_cancel() {
    let (mut net, i) = one_ioc("pv s DOUBLE DEFAULT SINE 100 5\n");
    let c = add_client(&mut net, "c", &["ioc1:5064"], false, id("u", "h"));
    let op = net.with_client(c, |c, now| c.monitor("s", now));
    net.run_for(1000);
    net.with_client(c, |c, now| c.cancel(op, now));
    net.client_events(c);
    net.run_for(3000);
    assert!(net.client_events(c).is_empty());
    assert_eq!(net.ioc(i).subscription_count(), 0);
}

#[test]
fn monitor_timestamps_nondecreasing() {
    let (mut net, _) = one_ioc(&db("w", 3, "RANDOM_WALK", 1.0));
    let c = add_client(&mut net, "c", &["ioc1:5064"], false, id("u", "h"));
    let ops: Vec<u64> = (0..3)
        .map(|k| net.with_client(c, |c, now| c.monitor(&format!("w{k}"), now)))
        .collect();
    net.run_for(4000);
    let events = net.client_events(c);
    for op in ops {
        let ts: Vec<u64> = events
            .iter()
            .filter(|e| e.op() == op)
            .filter_map(|e| match e {
                ClientEvent::Monitor { value, .. } => Some(value.timestamp),
                _ => None,
            })
            .collect();
        assert!(ts.len() >= 39);
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn connection_loss_ends_monitor_with_invalid() {
    let (mut net, i) = one_ioc("pv s DOUBLE DEFAULT SINE 100 5\n");
    let c = add_client(&mut net, "c", &["ioc1:5064"], false, id("u", "h"));
    let op = net.with_client(c, |c, now| c.monitor("s", now));
    net.run_for(2000);
    net.client_events(c);
    let killed = net.now();
    net.kill(i);
    net.run_for(12_000);
    let events = net.client_events(c);
    let n = events.len();
    assert!(n >= 2);
    match (&events[n - 2], &events[n - 1]) {
        (
            ClientEvent::Monitor { value, .. },
            ClientEvent::MonitorEnded {
                error,
                at,
                retry_at,
                op: ended,
                ..
            },
        ) => {
            assert_eq!(value.severity, Severity::Invalid);
            assert_eq!(*error, ClientError::ConnLost);
            assert_eq!(*ended, op);
            assert!(*at - killed <= 10_000);
            assert_eq!(*retry_at, None);
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(net.client(c).connection_count(), 0);
}

#[test]
fn address_list_validation() {
    assert!(matches!(
        AddressList::new(vec![], false),
        Err(ClientError::AddressList(_))
    ));
    assert!(AddressList::new(vec![ep("a:1"), ep("a:1")], false).is_err());
    let l: AddressList = "a:1, b:2".parse().unwrap();
    assert_eq!(l.endpoints(), &[ep("a:1"), ep("b:2")]);
    assert_eq!(
        l.to_string().parse::<AddressList>().unwrap().endpoints(),
        l.endpoints()
    );
}
