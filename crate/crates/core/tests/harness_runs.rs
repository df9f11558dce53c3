use proptest::prelude::*;
use pvgate::harness::*;
use pvgate::iocsim::Generator;

fn single(m: usize, secs: u64) -> ScenarioSpec {
    ScenarioSpec {
        iocs: 1,
        pvs_per_ioc: 10,
        clients: m,
        duration_secs: secs,
        ..ScenarioSpec::standard()
    }
}

fn polylines(svg: &str) -> Vec<(String, Vec<(f64, f64)>)> {
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .map(|l| {
            let col = l
                .split("data-column=\"")
                .nth(1)
                .unwrap()
                .split('"')
                .next()
                .unwrap();
            let pts = l
                .split("points=\"")
                .nth(1)
                .unwrap()
                .split('"')
                .next()
                .unwrap();
            let pts = pts
                .split_whitespace()
                .map(|p| {
                    let (x, y) = p.split_once(',').unwrap();
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect();
            (col.to_string(), pts)
        })
        .collect()
}

#[test]
fn twenty_monitors_on_one_ioc() {
    let r = run_topology(&single(20, 12)).unwrap();
    assert_eq!(r.direct.last().unwrap().iocs[0].fds, 24);
    assert_eq!(r.gateway.last().unwrap().iocs[0].fds, 5);
    assert_eq!((r.fd_reduction_pct * 10.0).round() / 10.0, 79.2);
    // events leaving the IOC: 20 per PV update direct, 1 via the gateway
    let d = r.direct.last().unwrap().iocs[0].event_posts_per_sec;
    let g = r.gateway.last().unwrap().iocs[0].event_posts_per_sec;
    assert!((d - 2000.0).abs() <= 20.0, "{d}");
    assert!((g - 100.0).abs() <= 1.0, "{g}");
    assert!(r.cpu_reduction_pct >= 20.0);
    assert!(r.passed(), "{:?}", r.checks());
}

#[test]
fn direct_variant_hits_the_fd_ceiling() {
    let spec = ScenarioSpec {
        pvs_per_ioc: 2,
        ..single(150, 3)
    };
    let r = run_topology(&spec).unwrap();
    let d = &r.direct.last().unwrap().iocs[0];
    assert_eq!(d.connections, 146);
    assert_eq!(d.fds, 150);
    assert_eq!(r.direct_refusals, vec![4]);
    assert_eq!(r.gateway.last().unwrap().iocs[0].connections, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn fd_reduction_formula(m in 3usize..60) {
        let r = run_topology(&single(m, 2)).unwrap();
        prop_assert_eq!(r.gateway.last().unwrap().iocs[0].connections, 1);
        prop_assert_eq!(r.direct.last().unwrap().iocs[0].connections, m);
        let expected = 100.0 * (1.0 - 5.0 / (4.0 + m as f64));
        prop_assert!((r.fd_reduction_pct - expected).abs() < 1e-9);
        prop_assert!(r.fd_reduction_pct > 25.0);
    }
}

#[test]
fn two_monitors_reduce_fds_by_a_sixth() {
    let r = run_topology(&single(2, 2)).unwrap();
    assert!((r.fd_reduction_pct - 100.0 / 6.0).abs() < 1e-9);
}

#[test]
fn csv_shape_and_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ScenarioSpec {
        iocs: 2,
        pvs_per_ioc: 5,
        clients: 4,
        duration_secs: 30,
        ..ScenarioSpec::standard()
    };
    let r = run_topology(&spec).unwrap();
    let path = dir.path().join("r.csv");
    emit_csv(&r, &path).unwrap();
    let mut rd = csv::Reader::from_path(&path).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, csv_header(2));
    assert_eq!(
        header,
        [
            "t",
            "alive_pvs",
            "active_pvs",
            "event_rate",
            "post_rate",
            "ioc0_fds",
            "ioc1_fds",
            "ioc0_cpu_proxy",
            "ioc1_cpu_proxy"
        ]
    );
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 31);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0].parse::<u64>().unwrap(), i as u64);
        let alive: u64 = row[1].parse().unwrap();
        let active: u64 = row[2].parse().unwrap();
        assert!(alive >= active);
    }
    assert_eq!(&rows[30][1], "10");

    let again = dir.path().join("again.csv");
    emit_csv(&run_topology(&spec).unwrap(), &again).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn empty_report_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    let spec = ScenarioSpec::standard();
    emit_csv(&RunReport::empty(&spec), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, format!("{}\n", csv_header(2).join(",")));
}

#[test]
fn chart_from_hand_written_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("in.csv");
    std::fs::write(&csv_path, "t,flat,ramp\n0,7,0\n1,7,1\n2,7,2\n3,7,3\n").unwrap();
    let out = dir.path().join("out.svg");
    render_chart(&csv_path, &out, &["flat", "ramp"]).unwrap();
    let svg = std::fs::read_to_string(&out).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("class=\"legend\"").count(), 2);
    let lines = polylines(&svg);
    assert_eq!(lines.len(), 2);
    let (name, flat) = &lines[0];
    assert_eq!(name, "flat");
    assert_eq!(flat.len(), 4);
    assert!(flat.iter().all(|p| p.1 == flat[0].1), "horizontal");
    let ramp = &lines[1].1;
    assert!(ramp.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 < w[0].1));

    let out2 = dir.path().join("out2.svg");
    render_chart(&csv_path, &out2, &["flat", "ramp"]).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&out2).unwrap());

    assert!(matches!(
        render_chart(&csv_path, &out, &["nope"]),
        Err(HarnessError::MissingColumn(c)) if c == "nope"
    ));
    assert!(matches!(
        render_chart(&dir.path().join("missing.csv"), &out, &["flat"]),
        Err(HarnessError::Csv(_) | HarnessError::Io(_))
    ));
}

#[test]
fn scenario_files() {
    let s = ScenarioSpec::parse(
        "# small\niocs = 3\nclients=7\ngenerators = SINE, COUNTER\nkill_at_secs = 5\n",
    )
    .unwrap();
    assert_eq!((s.iocs, s.clients, s.kill_at_secs), (3, 7, Some(5)));
    assert_eq!(s.generators, vec![Generator::Sine, Generator::Counter]);
    assert_eq!(s.pvs_per_ioc, ScenarioSpec::standard().pvs_per_ioc);
    assert!(matches!(
        ScenarioSpec::parse("bogus = 1"),
        Err(HarnessError::Config(_))
    ));
    assert!(matches!(
        ScenarioSpec::parse("clients = lots"),
        Err(HarnessError::Config(_))
    ));
    assert!(matches!(
        ScenarioSpec::parse("clients = 2\ndirect_public = 3"),
        Err(HarnessError::Scenario(_))
    ));
    assert!(matches!(
        ScenarioSpec::parse("kill_at_secs = 9\nrestart_at_secs = 4"),
        Err(HarnessError::Scenario(_))
    ));
}

#[test]
fn failure_injection_preconditions() {
    let no_critical = single(3, 5);
    assert!(matches!(
        inject_gateway_failure(&no_critical, 1000, None),
        Err(HarnessError::Scenario(_))
    ));
    let spec = ScenarioSpec {
        critical_clients: 1,
        ..single(2, 5)
    };
    assert!(inject_gateway_failure(&spec, 1500, None).is_err());
    assert!(inject_gateway_failure(&spec, 2000, Some(1000)).is_err());
}

#[test]
fn failure_without_restart() {
    let spec = ScenarioSpec {
        critical_clients: 1,
        ..single(3, 20)
    };
    let r = inject_gateway_failure(&spec, 5000, None).unwrap();
    let f = r.failure.as_ref().unwrap();
    assert!(f.critical_identical);
    assert!(f
        .invalid_latency_ms
        .iter()
        .all(|l| l.is_some_and(|ms| ms <= 10_000)));
    assert!(f.recovered.iter().all(|r| !r));
    assert_eq!(r.interruption_seconds, 0.0);
    assert!(r.passed(), "{:?}", r.checks());
}

#[test]
fn mixed_population() {
    // some public clients stay direct; critical clients always are
    let spec = ScenarioSpec {
        clients: 6,
        direct_public: 2,
        critical_clients: 1,
        ..single(6, 5)
    };
    let r = run_topology(&spec).unwrap();
    assert_eq!(r.gateway.last().unwrap().iocs[0].connections, 1 + 2 + 1);
    assert_eq!(r.direct.last().unwrap().iocs[0].connections, 6 + 1);
    assert_eq!(r.gateway.gateway_logs().count(), 4);
    assert!(r.gateway.critical_logs().all(|l| !l.via_gateway));
}
