use std::path::PathBuf;

use tailbench::balancer::Policy;
use tailbench::orchestrator::{
    compare_runs, parse_scenario, parse_scenario_str, parse_sweep, run_scenario, run_sweep,
    LaunchMode, OrchestratorError, RunOptions, SweepSpec, Target,
};
use tailbench::stats::Metric;

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn case1_file() {
    let s = parse_scenario(&shipped("case1.scenario")).unwrap();
    assert_eq!(s.servers.len(), 1);
    assert_eq!(s.servers[0].spec.workers, 1);
    assert!(s.balancer.is_none());
    let starts: Vec<f64> = s.clients.iter().map(|c| c.spec.start_delay_s).collect();
    let budgets: Vec<u64> = s.clients.iter().map(|c| c.spec.total_requests).collect();
    assert_eq!(starts, [0.0, 15.0, 35.0]);
    assert_eq!(budgets, [10_000, 7_000, 5_000]);
    for c in &s.clients {
        assert_eq!(c.spec.schedule.current_rate(0.0), 200.0);
        assert_eq!(c.target, Target::Server(0));
    }
}

#[test]
fn case2_file() {
    let s = parse_scenario(&shipped("case2.scenario")).unwrap();
    assert_eq!((s.servers.len(), s.clients.len()), (1, 1));
    let iv: Vec<(f64, f64)> = s.clients[0]
        .spec
        .schedule
        .intervals()
        .iter()
        .map(|i| (i.start_s, i.qps))
        .collect();
    assert_eq!(
        iv,
        [(0.0, 100.0), (10.0, 300.0), (20.0, 500.0), (30.0, 600.0), (40.0, 800.0), (50.0, 100.0)]
    );
    assert_eq!(s.clients[0].spec.total_requests, 24_000);
    let light = parse_scenario(&shipped("case2-light.scenario")).unwrap();
    assert_eq!(light.servers[0].spec.workload.mean_service_us, 250.0);
    assert_eq!(light.clients[0].spec.schedule, s.clients[0].spec.schedule);
}

#[test]
fn case3_files() {
    let s = parse_scenario(&shipped("case3.scenario")).unwrap();
    let b = s.balancer.as_ref().unwrap();
    assert_eq!(b.policy, Policy::LoadAware);
    assert_eq!(b.backends, vec![0, 1]);
    assert_eq!(b.declared_rates.len(), 3);
    // one server saturates at 700 QPS
    let mu = 1e6 / s.servers[0].spec.workload.mean_service_us;
    assert!((mu - 700.0).abs() < 0.01, "{mu}");
    let rates: Vec<f64> = s.clients.iter().map(|c| c.spec.schedule.current_rate(0.0)).collect();
    assert_eq!(rates, [500.0, 200.0, 200.0]);
    assert!(s.clients.iter().all(|c| c.target == Target::Balancer));
    let rr = parse_scenario(&shipped("case3-round-robin.scenario")).unwrap();
    assert_eq!(rr.balancer.unwrap().policy, Policy::RoundRobin);
}

#[test]
fn sweep_files() {
    for name in ["one-server.sweep", "two-server.sweep", "selfcheck.sweep"] {
        let s = parse_sweep(&shipped(name)).unwrap();
        assert!(s.qps.windows(2).all(|w| w[0] < w[1]), "{name}");
        assert!(s.duration_s.is_some());
    }
    let one = parse_sweep(&shipped("one-server.sweep")).unwrap();
    let two = parse_sweep(&shipped("two-server.sweep")).unwrap();
    assert_eq!(one.qps, two.qps);
    assert_eq!(one.base.servers.len(), 1);
    assert_eq!(two.base.servers.len(), 2);
    assert_eq!(parse_sweep(&shipped("selfcheck.sweep")).unwrap().repetitions, 13);
}

#[test]
fn sweep_file_errors_are_located() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(shipped("selfcheck.scenario"), dir.path().join("b.scenario")).unwrap();
    let p = dir.path().join("bad.sweep");
    std::fs::write(&p, "[sweep]\nscenario = b.scenario\nqps = 300, 200\n").unwrap();
    let e = parse_sweep(&p).unwrap_err();
    assert_eq!(e.line, 3);
    assert!(e.to_string().contains("bad.sweep:3"), "{e}");
    std::fs::write(&p, "[sweep]\nscenario = missing.scenario\nqps = 100\n").unwrap();
    assert!(parse_sweep(&p).is_err());
}

const SMALL: &str = "
[scenario]
name = small
repetitions = 1
window_s = 0.5

[server s0]
workload = exponential
mean_service_us = 200
seed = 3

[client a]
id = 1
target = s0
total_requests = 300
schedule = 0:200

[client b]
id = 2
target = s0
start_delay_s = 0.5
total_requests = 100
schedule = 0:100
";

#[test]
fn run_reports_every_client_and_writes_outputs() {
    let spec = parse_scenario_str(SMALL).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let r = run_scenario(&spec, &opts).unwrap();
    assert!(r.ok(), "{:?}", r.failures);
    assert_eq!(r.clients.len(), 2);
    for c in &r.clients {
        assert!(c.complete());
        assert!(r.client_summary(c.client_id).is_some());
        assert!(dir.path().join(format!("client_{}.csv", c.client_id)).exists());
    }
    // b starts half a second in and runs about a second
    let b = r.client(2).unwrap();
    assert_eq!(b.start_offset_s, 0.5);
    assert!((b.lifetime_s() - 1.0).abs() < 0.3, "{}", b.lifetime_s());
    assert_eq!(r.summary().unwrap().n, 400);
    assert_eq!(r.servers[0].served_total, 402);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("scope,window_start_s,window_end_s,n,mean_ms,p95_ms,p99_ms"));
    for scope in ["client_1,", "client_2,", "client_1_total,", "client_2_total,", "all_total,"] {
        assert!(summary.lines().any(|l| l.starts_with(scope)), "{scope}");
    }
    // client 2's windows before its start are empty
    assert!(summary.contains("client_2,0.000,0.500,0,,,"));
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("status: ok"));
    assert!(dir.path().join("server_0_events.csv").exists());
}

#[test]
fn repeated_runs_share_structure() {
    let spec = parse_scenario_str(SMALL).unwrap();
    let a = run_scenario(&spec, &RunOptions::default()).unwrap();
    let b = run_scenario(&spec, &RunOptions::default()).unwrap();
    for (x, y) in a.clients.iter().zip(&b.clients) {
        assert_eq!(x.log.entries.len(), y.log.entries.len());
        let plan = |c: &tailbench::orchestrator::ClientOutcome| {
            let mut v: Vec<(u64, u64)> = c
                .log
                .entries
                .iter()
                .map(|e| (e.request_id, e.planned_ns - c.log.start_ns))
                .collect();
            v.sort_unstable();
            v
        };
        assert_eq!(plan(x), plan(y));
    }
}

#[test]
fn warmup_exclusion_drops_first_second() {
    let spec = parse_scenario_str(SMALL).unwrap();
    let mut r = run_scenario(&spec, &RunOptions::default()).unwrap();
    let all = r.client_samples(1).len();
    r.exclude_warmup = true;
    let kept = r.client_samples(1);
    assert!(kept.iter().all(|s| s.send_offset_s >= 1.0));
    // about 200 of client 1's 300 requests fall in its first second
    assert!(all - kept.len() > 150, "{} of {all}", kept.len());
}

#[test]
fn process_server_without_binary_fails_cleanly() {
    let mut spec = parse_scenario_str(SMALL).unwrap();
    spec.servers[0].mode = LaunchMode::Process;
    match run_scenario(&spec, &RunOptions::default()) {
        Err(OrchestratorError::Launch(msg)) => assert!(msg.contains("no server binary")),
        other => panic!("expected launch error, got {other:?}"),
    }
}

#[test]
fn occupied_server_port_fails_setup() {
    let mut spec = parse_scenario_str(SMALL).unwrap();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    spec.servers[0].spec.listen_address = taken.local_addr().unwrap().to_string();
    assert!(matches!(
        run_scenario(&spec, &RunOptions::default()),
        Err(OrchestratorError::Server(_))
    ));
}

#[test]
fn single_point_sweep_matches_a_run_and_self_compare_is_null() {
    let base = parse_scenario_str(SMALL).unwrap();
    let sweep = SweepSpec::new("one", base.clone(), vec![150.0, 250.0], 2, Some(1.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let mut seen = 0;
    let report = run_sweep(&sweep, &opts, 0, |_| seen += 1).unwrap();
    assert_eq!(seen, 4);
    assert!(report.complete());
    for c in &report.cells {
        // two clients at qps for 1 s each
        assert_eq!(c.summary.unwrap().n, 2 * c.qps as usize);
    }
    assert!(report.points().iter().all(|p| p.ci.is_some()));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(dir.path().join("qps_150/rep_1/summary.csv").exists());

    let t = report.to_table();
    let cmp = compare_runs(&t, &t, &Metric::ALL).unwrap();
    for (_, r) in &cmp.rows {
        assert_eq!((r.t_statistic, r.p_value), (0.0, 1.0));
    }

    let single = SweepSpec::new("single", base, vec![200.0], 1, Some(1.0)).unwrap();
    let r = run_sweep(&single, &RunOptions::default(), 0, |_| {}).unwrap();
    let p = r.points();
    assert_eq!(p.len(), 3);
    assert!(p.iter().all(|p| p.ci.is_none() && p.reps == 1));
    let mean = p.iter().find(|p| p.metric == Metric::Mean).unwrap().mean;
    assert_eq!(mean, r.cells[0].summary.unwrap().mean_ms);
}
