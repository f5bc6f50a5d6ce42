//! Running one scenario end to end.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{info, warn};

use crate::balancer::{self, Assignment, BalancerHandle, BalancerSpec};
use crate::client::{self, ClientLog};
use crate::clock::{now_ns, secs_to_ns, sleep_until};
use crate::server::{self, QueueCapacity, ServerHandle, ServerSpec, ServerStats};
use crate::stats::{
    samples_from_log, summarize, windowed, write_summary_row, LatencySample, LatencySummary,
    WindowKey, WindowSummary, SUMMARY_HEADER,
};
use crate::workload::Distribution;

use super::scenario::{LaunchMode, ScenarioSpec, Target};
use super::OrchestratorError;

/// How long before its scheduled start a client connects and pings.
const CONNECT_LEAD: Duration = Duration::from_millis(200);
/// Gap between "everything is listening" and the scenario origin.
const START_MARGIN: Duration = Duration::from_millis(300);
/// Seconds dropped from the front of each client when warm-up exclusion is on.
pub const WARMUP_S: f64 = 1.0;
const CHILD_STOP_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write logs, summaries and a manifest here.
    pub out_dir: Option<PathBuf>,
    /// Executable providing the `server` subcommand, for process-mode servers.
    pub server_binary: Option<PathBuf>,
    /// Overrides the scenario's own warm-up flag when set.
    pub exclude_warmup: Option<bool>,
    pub window_key: WindowKey,
    /// Enable the balancer's per-frame trace.
    pub frame_trace: bool,
}

#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub name: String,
    pub client_id: u64,
    pub target: Target,
    pub budget: u64,
    /// Scheduled start relative to the scenario origin.
    pub start_offset_s: f64,
    pub log: ClientLog,
    /// Connection or run failure, if any.
    pub error: Option<String>,
}

impl ClientOutcome {
    pub fn lifetime_s(&self) -> f64 {
        self.log.lifetime_s()
    }

    pub fn end_offset_s(&self) -> f64 {
        self.start_offset_s + self.log.lifetime_s()
    }

    pub fn complete(&self) -> bool {
        self.error.is_none()
            && self.log.aborted.is_none()
            && self.log.protocol_errors == 0
            && self.log.entries.len() as u64 == self.budget
    }
}

/// Everything a scenario run produced.
#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub name: String,
    /// Scenario time zero in the `clock::now_ns` domain.
    pub origin_ns: u64,
    pub window_s: f64,
    pub window_key: WindowKey,
    pub exclude_warmup: bool,
    pub clients: Vec<ClientOutcome>,
    pub servers: Vec<ServerStats>,
    /// Balancer decisions, in HELLO order, with backend indices mapped to
    /// server ids.
    pub assignments: Vec<(u64, u32)>,
    pub failures: Vec<String>,
    pub out_dir: Option<PathBuf>,
    pub frame_trace: Vec<balancer::TracedFrame>,
}

impl ScenarioReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn client(&self, client_id: u64) -> Option<&ClientOutcome> {
        self.clients.iter().find(|c| c.client_id == client_id)
    }

    /// Samples of one client, relative to the scenario origin, after
    /// warm-up exclusion.
    pub fn client_samples(&self, client_id: u64) -> Vec<LatencySample> {
        self.client(client_id)
            .map(|c| self.samples_of(c))
            .unwrap_or_default()
    }

    fn samples_of(&self, c: &ClientOutcome) -> Vec<LatencySample> {
        let mut s = samples_from_log(&c.log, self.origin_ns);
        if self.exclude_warmup {
            let cut = c.start_offset_s + WARMUP_S;
            s.retain(|x| x.send_offset_s >= cut);
        }
        s
    }

    pub fn samples(&self) -> Vec<LatencySample> {
        self.clients
            .iter()
            .flat_map(|c| self.samples_of(c))
            .collect()
    }

    /// Whole-run summary across all clients.
    pub fn summary(&self) -> Option<LatencySummary> {
        summarize(&self.samples(), None).ok()
    }

    pub fn client_summary(&self, client_id: u64) -> Option<LatencySummary> {
        summarize(&self.client_samples(client_id), None).ok()
    }

    /// Offset of the last client's completion.
    pub fn end_offset_s(&self) -> f64 {
        self.clients
            .iter()
            .map(ClientOutcome::end_offset_s)
            .fold(0.0, f64::max)
    }

    /// Windowed series for one client over the whole scenario span.
    pub fn client_windows(&self, client_id: u64) -> Vec<WindowSummary> {
        let end = (self.end_offset_s() / self.window_s).ceil() * self.window_s;
        windowed(
            &self.client_samples(client_id),
            0.0,
            end,
            self.window_s,
            self.window_key,
        )
    }

    /// Server id a client was routed to, through the balancer or directly.
    pub fn assigned_server(&self, client_id: u64) -> Option<u32> {
        self.assignments
            .iter()
            .find(|(c, _)| *c == client_id)
            .map(|(_, s)| *s)
    }

    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{SUMMARY_HEADER}")?;
        for c in &self.clients {
            let scope = format!("client_{}", c.client_id);
            for win in self.client_windows(c.client_id) {
                write_summary_row(&mut w, &scope, win.start_s, win.end_s, win.summary.as_ref())?;
            }
        }
        for c in &self.clients {
            let scope = format!("client_{}_total", c.client_id);
            let s = self.client_summary(c.client_id);
            write_summary_row(
                &mut w,
                &scope,
                c.start_offset_s,
                c.end_offset_s(),
                s.as_ref(),
            )?;
        }
        write_summary_row(
            &mut w,
            "all_total",
            0.0,
            self.end_offset_s(),
            self.summary().as_ref(),
        )
    }

    pub fn write_manifest<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "scenario: {}", self.name)?;
        writeln!(w, "status: {}", if self.ok() { "ok" } else { "failed" })?;
        writeln!(w, "window_s: {}", self.window_s)?;
        writeln!(w, "exclude_warmup: {}", self.exclude_warmup)?;
        for c in &self.clients {
            writeln!(
                w,
                "client {} ({}): start {:.3}s, lifetime {:.3}s, {}/{} responses, server {}{}",
                c.client_id,
                c.name,
                c.start_offset_s,
                c.lifetime_s(),
                c.log.entries.len(),
                c.budget,
                self.assigned_server(c.client_id)
                    .map_or("?".to_string(), |s| s.to_string()),
                c.error
                    .as_deref()
                    .or(c.log.aborted.as_deref())
                    .map(|e| format!(", error: {e}"))
                    .unwrap_or_default(),
            )?;
        }
        for s in &self.servers {
            writeln!(
                w,
                "server {}: served {}, dropped {}, rejected {}",
                s.server_id, s.served_total, s.drops, s.rejected
            )?;
        }
        for f in &self.failures {
            writeln!(w, "failure: {f}")?;
        }
        Ok(())
    }

    /// Write client logs, `summary.csv` and `manifest.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for c in &self.clients {
            c.log
                .save(&dir.join(format!("client_{}.csv", c.client_id)))?;
        }
        let mut f = BufWriter::new(File::create(dir.join("summary.csv"))?);
        self.write_summary_csv(&mut f)?;
        f.flush()?;
        let mut f = BufWriter::new(File::create(dir.join("manifest.txt"))?);
        self.write_manifest(&mut f)?;
        f.flush()
    }
}

/// A server running as a child process of this one.
pub struct ChildServer {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: Option<JoinHandle<String>>,
    addr: String,
    server_id: u32,
}

impl ChildServer {
    pub fn spawn(binary: &Path, spec: &ServerSpec) -> Result<Self, OrchestratorError> {
        let mut cmd = Command::new(binary);
        cmd.arg("server")
            .args(["--id", &spec.server_id.to_string()])
            .args(["--listen", &spec.listen_address])
            .args(["--workers", &spec.workers.to_string()])
            .args(["--workload", spec.workload.distribution.name()])
            .args([
                "--mean-service-us",
                &spec.workload.mean_service_us.to_string(),
            ])
            .args(["--seed", &spec.workload.seed.to_string()]);
        match spec.workload.distribution {
            Distribution::LogNormal { sigma } => {
                cmd.args(["--sigma", &sigma.to_string()]);
            }
            Distribution::ZipfItems {
                item_count,
                zipf_exponent,
            } => {
                cmd.args(["--item-count", &item_count.to_string()])
                    .args(["--zipf-exponent", &zipf_exponent.to_string()]);
            }
            _ => {}
        }
        if let QueueCapacity::Bounded(n) = spec.queue_capacity {
            cmd.args(["--queue-capacity", &n.to_string()]);
        }
        if let Some(p) = &spec.event_log {
            cmd.arg("--event-log").arg(p);
        }
        let mut child = cmd
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| OrchestratorError::Launch(format!("{}: {e}", binary.display())))?;
        let stdin = child.stdin.take();
        let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut line = String::new();
        let read = stdout.read_line(&mut line);
        let addr = match (read, line.trim().strip_prefix("listening ")) {
            (Ok(n), Some(addr)) if n > 0 => addr.to_string(),
            _ => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(OrchestratorError::Launch(format!(
                    "server {} process did not report a listening address (got `{}`)",
                    spec.server_id,
                    line.trim()
                )));
            }
        };
        // drain the rest in the background so the child never blocks on a full pipe
        let rest = std::thread::spawn(move || {
            let mut out = String::new();
            let _ = io::Read::read_to_string(&mut stdout, &mut out);
            out
        });
        Ok(ChildServer {
            child,
            stdin,
            stdout: Some(rest),
            addr,
            server_id: spec.server_id,
        })
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    /// Ask the child to stop, wait for it, and parse its final counters.
    pub fn stop(mut self) -> Result<ServerStats, OrchestratorError> {
        if let Some(mut stdin) = self.stdin.take() {
            let _ = writeln!(stdin, "stop");
        }
        let deadline = Instant::now() + CHILD_STOP_TIMEOUT;
        let status = loop {
            match self.child.try_wait() {
                Ok(Some(st)) => break Some(st),
                Ok(None) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(20))
                }
                _ => break None,
            }
        };
        let Some(status) = status else {
            let _ = self.child.kill();
            let _ = self.child.wait();
            return Err(OrchestratorError::Launch(format!(
                "server {} did not stop in time and was killed",
                self.server_id
            )));
        };
        let out = self
            .stdout
            .take()
            .and_then(|h| h.join().ok())
            .unwrap_or_default();
        if !status.success() {
            return Err(OrchestratorError::Launch(format!(
                "server {} exited with {status}",
                self.server_id
            )));
        }
        parse_final_stats(self.server_id, &out).ok_or_else(|| {
            OrchestratorError::Launch(format!(
                "server {} printed no final counters",
                self.server_id
            ))
        })
    }
}

impl Drop for ChildServer {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

/// Final line printed by the `server` subcommand on shutdown.
pub fn format_final_stats(s: &ServerStats) -> String {
    format!(
        "stopped served={} drops={} rejected={}",
        s.served_total, s.drops, s.rejected
    )
}

fn parse_final_stats(server_id: u32, out: &str) -> Option<ServerStats> {
    let line = out.lines().rev().find(|l| l.starts_with("stopped "))?;
    let mut stats = ServerStats {
        server_id,
        served_total: 0,
        drops: 0,
        rejected: 0,
    };
    for kv in line.split_whitespace().skip(1) {
        let (k, v) = kv.split_once('=')?;
        let v: u64 = v.parse().ok()?;
        match k {
            "served" => stats.served_total = v,
            "drops" => stats.drops = v,
            "rejected" => stats.rejected = v,
            _ => {}
        }
    }
    Some(stats)
}

enum RunningServer {
    Local(ServerHandle),
    Child(ChildServer),
}

impl RunningServer {
    fn addr(&self) -> String {
        match self {
            RunningServer::Local(h) => h.local_addr().to_string(),
            RunningServer::Child(c) => c.addr().to_string(),
        }
    }

    fn stop(self) -> Result<ServerStats, OrchestratorError> {
        match self {
            RunningServer::Local(h) => h.stop().map_err(OrchestratorError::from),
            RunningServer::Child(c) => c.stop(),
        }
    }
}

/// Start every component, drive the clients to completion, stop
/// everything and collect the report. Component failures mark the report
/// failed; only setup errors (nothing could be started) return `Err`.
pub fn run_scenario(
    spec: &ScenarioSpec,
    opts: &RunOptions,
) -> Result<ScenarioReport, OrchestratorError> {
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut failures = Vec::new();

    let mut servers: Vec<RunningServer> = Vec::with_capacity(spec.servers.len());
    for sv in &spec.servers {
        let mut sspec = sv.spec.clone();
        if let Some(dir) = &opts.out_dir {
            sspec.event_log = Some(dir.join(format!("server_{}_events.csv", sspec.server_id)));
        }
        let started = match sv.mode {
            LaunchMode::InProcess => server::start(sspec)
                .map(RunningServer::Local)
                .map_err(Into::into),
            LaunchMode::Process => match &opts.server_binary {
                Some(bin) => ChildServer::spawn(bin, &sspec).map(RunningServer::Child),
                None => Err(OrchestratorError::Launch(format!(
                    "server `{}` runs as a process but no server binary was given",
                    sv.name
                ))),
            },
        };
        match started {
            Ok(s) => servers.push(s),
            Err(e) => {
                // dropping the already-running servers stops them
                return Err(e);
            }
        }
    }
    let addrs: Vec<String> = servers.iter().map(RunningServer::addr).collect();

    let balancer: Option<BalancerHandle> = match &spec.balancer {
        None => None,
        Some(b) => {
            let mut bspec = BalancerSpec::new(
                b.listen_address.clone(),
                b.backends.iter().map(|&i| addrs[i].clone()).collect(),
                b.policy,
            );
            bspec.declared_rates = b.declared_rates.clone();
            bspec.frame_trace = opts.frame_trace;
            Some(balancer::start(bspec)?)
        }
    };
    let balancer_addr = balancer.as_ref().map(|b| b.local_addr().to_string());

    let mut order: Vec<usize> = (0..spec.clients.len()).collect();
    order.sort_by(|&a, &b| {
        spec.clients[a]
            .spec
            .start_delay_s
            .total_cmp(&spec.clients[b].spec.start_delay_s)
    });

    let origin_ns = now_ns() + (CONNECT_LEAD + START_MARGIN).as_nanos() as u64;
    info!("scenario `{}`: {} clients", spec.name, spec.clients.len());

    struct Launched {
        index: usize,
        start_ns: u64,
        thread: Option<JoinHandle<ClientLog>>,
        error: Option<String>,
    }
    let mut launched = Vec::with_capacity(order.len());
    for i in order {
        let c = &spec.clients[i];
        let mut cspec = c.spec.clone();
        cspec.target_address = match c.target {
            Target::Server(s) => addrs[s].clone(),
            Target::Balancer => balancer_addr.clone().expect("validated balancer"),
        };
        let start_ns = origin_ns + secs_to_ns(cspec.start_delay_s);
        sleep_until(start_ns.saturating_sub(CONNECT_LEAD.as_nanos() as u64));
        let (thread, error) = match client::connect(&cspec) {
            Ok(conn) => {
                let t = std::thread::Builder::new()
                    .name(format!("client{}", cspec.client_id))
                    .spawn(move || conn.run(start_ns));
                match t {
                    Ok(t) => (Some(t), None),
                    Err(e) => (None, Some(format!("cannot spawn client thread: {e}"))),
                }
            }
            Err(e) => (None, Some(e.to_string())),
        };
        launched.push(Launched {
            index: i,
            start_ns,
            thread,
            error,
        });
    }

    let mut clients = Vec::with_capacity(launched.len());
    for l in launched {
        let c = &spec.clients[l.index];
        let mut error = l.error;
        let log = match l.thread.map(JoinHandle::join) {
            Some(Ok(log)) => log,
            Some(Err(_)) => {
                error = Some("client thread panicked".into());
                empty_log(c.spec.client_id, l.start_ns)
            }
            None => empty_log(c.spec.client_id, l.start_ns),
        };
        clients.push(ClientOutcome {
            name: c.name.clone(),
            client_id: c.spec.client_id,
            target: c.target,
            budget: c.spec.total_requests,
            start_offset_s: c.spec.start_delay_s,
            log,
            error,
        });
    }
    // report in declaration order
    clients.sort_by_key(|c| {
        spec.clients
            .iter()
            .position(|s| s.spec.client_id == c.client_id)
    });

    let mut assignments: Vec<(u64, u32)> = Vec::new();
    let mut frame_trace = Vec::new();
    if let (Some(b), Some(bspec)) = (balancer, &spec.balancer) {
        let id_of = |backend: usize| spec.servers[bspec.backends[backend]].spec.server_id;
        assignments = b
            .assignments()
            .into_iter()
            .map(
                |Assignment {
                     client_id, backend, ..
                 }| (client_id, id_of(backend)),
            )
            .collect();
        frame_trace = b.frame_trace();
        b.stop();
    }
    for c in &spec.clients {
        if let Target::Server(s) = c.target {
            assignments.push((c.spec.client_id, spec.servers[s].spec.server_id));
        }
    }

    let mut server_stats = Vec::with_capacity(servers.len());
    for s in servers {
        match s.stop() {
            Ok(st) => server_stats.push(st),
            Err(e) => failures.push(e.to_string()),
        }
    }

    for c in &clients {
        if let Some(e) = c.error.as_ref().or(c.log.aborted.as_ref()) {
            failures.push(format!("client {}: {e}", c.client_id));
        } else if !c.complete() {
            failures.push(format!(
                "client {}: {} of {} responses, {} protocol errors",
                c.client_id,
                c.log.entries.len(),
                c.budget,
                c.log.protocol_errors
            ));
        }
    }

    let report = ScenarioReport {
        name: spec.name.clone(),
        origin_ns,
        window_s: spec.window_s,
        window_key: opts.window_key,
        exclude_warmup: opts.exclude_warmup.unwrap_or(spec.exclude_warmup),
        clients,
        servers: server_stats,
        assignments,
        failures,
        out_dir: opts.out_dir.clone(),
        frame_trace,
    };
    if let Some(dir) = &opts.out_dir {
        report.save(dir)?;
    }
    if !report.ok() {
        warn!(
            "scenario `{}` failed: {}",
            report.name,
            report.failures.join("; ")
        );
    }
    Ok(report)
}

fn empty_log(client_id: u64, start_ns: u64) -> ClientLog {
    ClientLog {
        client_id,
        start_ns,
        end_ns: start_ns,
        ..ClientLog::default()
    }
}
