use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;

use tailbench::balancer::{self, parse_declared_rates, BalancerSpec, Policy};
use tailbench::client::ClientLog;
use tailbench::orchestrator::{
    compare_runs, format_final_stats, parse_scenario, parse_sweep, run_scenario, run_sweep,
    RunOptions, ScenarioReport, SweepTable,
};
use tailbench::server::{self, read_event_log, EventKind, QueueCapacity, ServerSpec};
use tailbench::stats::{
    quartiles, samples_from_log, summarize, windowed, write_summary_row, LatencySummary, Metric,
    WindowKey, BOXPLOT_HEADER, SUMMARY_HEADER,
};
use tailbench::workload::WorkloadSpec;

#[derive(Parser)]
#[command(
    name = "tailbench",
    version,
    about = "Open-loop tail-latency benchmark harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run(RunArgs),
    /// Run a QPS sweep file.
    Sweep(SweepArgs),
    /// Welch's t-test between two sweep results (sweep.csv or its directory).
    Compare(CompareArgs),
    /// Summarize client logs (client_<id>.csv) and server event logs.
    Stats(StatsArgs),
    /// Run one server until stopped.
    Server(ServerArgs),
    /// Run a balancer until stopped.
    Balancer(BalancerArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Added to every workload and arrival seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the repetition count.
    #[arg(long)]
    repetitions: Option<u32>,
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Drop each client's first second of samples.
    #[arg(long)]
    exclude_warmup: bool,
    /// Bucket time series by planned send time instead of completion time.
    #[arg(long)]
    window_by_send: bool,
}

#[derive(Args)]
struct SweepArgs {
    sweep: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CompareArgs {
    report_a: PathBuf,
    report_b: PathBuf,
    /// Write ttest.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of mean,p95,p99.
    #[arg(long, default_value = "mean,p95,p99")]
    metrics: String,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// Write summary.csv here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    window_s: f64,
}

#[derive(Args)]
struct ServerArgs {
    #[arg(long, default_value_t = 0)]
    id: u32,
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// fixed, exponential, lognormal or zipf-items.
    #[arg(long, default_value = "fixed")]
    workload: String,
    #[arg(long, default_value_t = 1000.0)]
    mean_service_us: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    item_count: Option<f64>,
    #[arg(long)]
    zipf_exponent: Option<f64>,
    /// Bounded queue length; unbounded when absent.
    #[arg(long)]
    queue_capacity: Option<usize>,
    #[arg(long)]
    event_log: Option<PathBuf>,
    /// Do not stop on `stop` or end of input on stdin; only signals stop.
    #[arg(long)]
    ignore_stdin: bool,
}

#[derive(Args)]
struct BalancerArgs {
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Backend `host:port`; repeat for each server.
    #[arg(long = "backend", required = true)]
    backends: Vec<String>,
    #[arg(long, default_value = "round_robin")]
    policy: Policy,
    /// File of `client_id qps` lines for load_aware.
    #[arg(long)]
    declared_rates: Option<PathBuf>,
    #[arg(long)]
    ignore_stdin: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Server(a) => cmd_server(a),
        Command::Balancer(a) => cmd_balancer(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run_options(out: Option<PathBuf>) -> Result<RunOptions> {
    Ok(RunOptions {
        out_dir: out,
        server_binary: Some(std::env::current_exe().context("locating own executable")?),
        ..RunOptions::default()
    })
}

fn cmd_run(a: RunArgs) -> Result<bool> {
    let spec = parse_scenario(&a.scenario)?;
    let reps = a.common.repetitions.unwrap_or(spec.repetitions);
    if reps == 0 {
        bail!("--repetitions must be positive");
    }
    let mut reports = Vec::with_capacity(reps as usize);
    for rep in 0..reps {
        let mut opts = run_options(a.common.out.as_ref().map(|d| {
            if reps == 1 {
                d.clone()
            } else {
                d.join(format!("rep_{rep}"))
            }
        }))?;
        opts.exclude_warmup = a.exclude_warmup.then_some(true);
        if a.window_by_send {
            opts.window_key = WindowKey::Send;
        }
        let seeded = spec.reseeded(a.common.seed.wrapping_add(rep as u64 * 1_000_003));
        let report = run_scenario(&seeded, &opts)?;
        print_report(&report, rep, reps);
        reports.push(report);
    }
    if let (Some(dir), true) = (&a.common.out, reps > 1) {
        write_repetition_summary(dir, &reports)?;
    }
    Ok(reports.iter().all(ScenarioReport::ok))
}

fn print_report(r: &ScenarioReport, rep: u32, reps: u32) {
    if reps > 1 {
        println!("== {} repetition {}/{reps}", r.name, rep + 1);
    } else {
        println!("== {}", r.name);
    }
    for c in &r.clients {
        let s = r.client_summary(c.client_id);
        println!(
            "client {:>3}: {:>6}/{:<6} responses  lifetime {:>7.2}s  server {}  {}",
            c.client_id,
            c.log.entries.len(),
            c.budget,
            c.lifetime_s(),
            r.assigned_server(c.client_id)
                .map_or("?".into(), |s| s.to_string()),
            s.map_or("no samples".into(), |s| fmt_summary(&s)),
        );
    }
    if let Some(s) = r.summary() {
        println!("all       : {}", fmt_summary(&s));
    }
    for f in &r.failures {
        println!("FAILED: {f}");
    }
}

fn fmt_summary(s: &LatencySummary) -> String {
    format!(
        "mean {:.3} ms  p95 {:.3} ms  p99 {:.3} ms",
        s.mean_ms, s.p95_ms, s.p99_ms
    )
}

fn write_repetition_summary(dir: &Path, reports: &[ScenarioReport]) -> Result<()> {
    let mut f = BufWriter::new(File::create(dir.join("repetitions.csv"))?);
    writeln!(f, "rep,ok,n,mean_ms,p95_ms,p99_ms")?;
    let mut all = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        match r.summary() {
            Some(s) => {
                writeln!(
                    f,
                    "{i},{},{},{:.6},{:.6},{:.6}",
                    r.ok(),
                    s.n,
                    s.mean_ms,
                    s.p95_ms,
                    s.p99_ms
                )?;
                all.push(s);
            }
            None => writeln!(f, "{i},{},0,,,", r.ok())?,
        }
    }
    f.flush()?;
    let mut f = BufWriter::new(File::create(dir.join("boxplot.csv"))?);
    writeln!(f, "{BOXPLOT_HEADER}")?;
    for m in Metric::ALL {
        let v: Vec<f64> = all.iter().map(|s| m.of(s)).collect();
        match quartiles(&v) {
            Ok(q) => writeln!(
                f,
                "all,{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                m.name(),
                q.min,
                q.q1,
                q.median,
                q.q3,
                q.max
            )?,
            Err(e) => {
                warn!("boxplot for {m}: {e}");
                break;
            }
        }
    }
    f.flush()?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<bool> {
    let mut sweep = parse_sweep(&a.sweep)?;
    if let Some(r) = a.common.repetitions {
        if r == 0 {
            bail!("--repetitions must be positive");
        }
        sweep.repetitions = r;
    }
    if sweep.repetitions < 2 {
        eprintln!("warning: one repetition per point; confidence interval columns will be empty");
    }
    let opts = run_options(a.common.out.clone())?;
    let total = sweep.qps.len() * sweep.repetitions as usize;
    let mut done = 0;
    let report = run_sweep(&sweep, &opts, a.common.seed, |cell| {
        done += 1;
        let status = match (&cell.error, &cell.summary) {
            (Some(e), _) => format!("FAILED: {e}"),
            (None, Some(s)) => fmt_summary(s),
            (None, None) => "no samples".into(),
        };
        eprintln!(
            "[{done}/{total}] qps {} rep {}: {status}",
            cell.qps, cell.rep
        );
    })?;
    if a.common.out.is_none() {
        report.write_csv(io::stdout().lock())?;
    }
    let missing = report.incomplete_qps();
    if !missing.is_empty() {
        eprintln!("incomplete cells at qps {missing:?}");
    }
    Ok(missing.is_empty())
}

fn cmd_compare(a: CompareArgs) -> Result<bool> {
    let metrics = a
        .metrics
        .split(',')
        .map(|m| Metric::parse(m.trim()).with_context(|| format!("unknown metric `{m}`")))
        .collect::<Result<Vec<_>>>()?;
    let ta = SweepTable::load(&a.report_a)?;
    let tb = SweepTable::load(&a.report_b)?;
    let cmp = compare_runs(&ta, &tb, &metrics)?;
    print!("{}", cmp.to_text());
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(File::create(dir.join("ttest.csv"))?);
        cmp.write_csv(&mut f)?;
        f.flush()?;
    }
    Ok(true)
}

/// `client_<id>.csv` names carry the client id; anything else is numbered
/// by position.
fn client_id_from_path(p: &Path, fallback: u64) -> u64 {
    p.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("client_"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(fallback)
}

fn server_id_from_path(p: &Path) -> u32 {
    p.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("server_"))
        .and_then(|s| s.split('_').next())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

fn cmd_stats(a: StatsArgs) -> Result<bool> {
    if !(a.window_s > 0.0) {
        bail!("--window-s must be positive");
    }
    let mut clients: Vec<ClientLog> = Vec::new();
    let mut servers = Vec::new();
    for (i, p) in a.logs.iter().enumerate() {
        let mut first = String::new();
        BufReader::new(File::open(p).with_context(|| p.display().to_string())?)
            .read_line(&mut first)?;
        if first.trim() == server::EVENT_LOG_HEADER {
            let events = read_event_log(server_id_from_path(p), BufReader::new(File::open(p)?))
                .with_context(|| p.display().to_string())?;
            servers.push((server_id_from_path(p), events));
        } else {
            let log = ClientLog::load(client_id_from_path(p, i as u64 + 1), p)
                .with_context(|| p.display().to_string())?;
            clients.push(log);
        }
    }
    let origin = clients
        .iter()
        .flat_map(|l| l.entries.iter().map(|e| e.send_ns))
        .min()
        .unwrap_or(0);
    let mut out: Box<dyn Write> = match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Box::new(BufWriter::new(File::create(dir.join("summary.csv"))?))
        }
        None => Box::new(io::stdout().lock()),
    };
    writeln!(out, "{SUMMARY_HEADER}")?;
    let mut all = Vec::new();
    let per_client: Vec<_> = clients
        .iter()
        .map(|l| (l.client_id, samples_from_log(l, origin)))
        .collect();
    let end = per_client
        .iter()
        .flat_map(|(_, s)| s.iter().map(|x| x.completion_offset_s))
        .fold(0.0, f64::max);
    let end = ((end / a.window_s).floor() + 1.0) * a.window_s;
    for (id, s) in &per_client {
        let scope = format!("client_{id}");
        for w in windowed(s, 0.0, end, a.window_s, WindowKey::Completion) {
            write_summary_row(&mut out, &scope, w.start_s, w.end_s, w.summary.as_ref())?;
        }
    }
    for (id, s) in &per_client {
        let sum = summarize(s, None).ok();
        write_summary_row(
            &mut out,
            &format!("client_{id}_total"),
            0.0,
            end,
            sum.as_ref(),
        )?;
        all.extend_from_slice(s);
    }
    if !per_client.is_empty() {
        write_summary_row(
            &mut out,
            "all_total",
            0.0,
            end,
            summarize(&all, None).ok().as_ref(),
        )?;
    }
    for (id, events) in &servers {
        // time spent inside the server, from enqueue to service end
        let resident: Vec<u64> = events
            .iter()
            .filter(|e| e.kind == EventKind::Served)
            .map(|e| {
                e.timings
                    .service_end_ns
                    .saturating_sub(e.timings.server_recv_ns)
            })
            .collect();
        let s = LatencySummary::from_ns(&resident).ok();
        write_summary_row(
            &mut out,
            &format!("server_{id}_total"),
            0.0,
            end,
            s.as_ref(),
        )?;
    }
    out.flush()?;
    Ok(true)
}

/// Block until a termination signal, or `stop`/end of input on stdin.
fn wait_for_stop(watch_stdin: bool) -> Result<()> {
    let (tx, rx) = mpsc::channel::<()>();
    let sig = tx.clone();
    ctrlc::set_handler(move || {
        let _ = sig.send(());
    })
    .context("installing signal handler")?;
    if watch_stdin {
        std::thread::spawn(move || {
            let stdin = io::stdin();
            for line in stdin.lock().lines() {
                match line {
                    Ok(l) if l.trim() == "stop" => break,
                    Ok(_) => continue,
                    Err(_) => break,
                }
            }
            let _ = tx.send(());
        });
    } else {
        // keep the channel open
        std::mem::forget(tx);
    }
    let _ = rx.recv();
    Ok(())
}

fn cmd_server(a: ServerArgs) -> Result<bool> {
    let params = [
        ("sigma", a.sigma),
        ("item_count", a.item_count),
        ("zipf_exponent", a.zipf_exponent),
    ];
    let workload = WorkloadSpec::from_name(&a.workload, a.mean_service_us, a.seed, |k| {
        params.iter().find(|(n, _)| *n == k).and_then(|(_, v)| *v)
    })?;
    let mut spec = ServerSpec::new(a.id, a.listen, workload);
    spec.workers = a.workers;
    spec.event_log = a.event_log;
    if let Some(n) = a.queue_capacity {
        if n == 0 {
            bail!("--queue-capacity must be positive");
        }
        spec.queue_capacity = QueueCapacity::Bounded(n);
    }
    let handle = server::start(spec)?;
    println!("listening {}", handle.local_addr());
    io::stdout().flush()?;
    wait_for_stop(!a.ignore_stdin)?;
    let stats = handle.stop()?;
    println!("{}", format_final_stats(&stats));
    io::stdout().flush()?;
    Ok(true)
}

fn cmd_balancer(a: BalancerArgs) -> Result<bool> {
    let mut spec = BalancerSpec::new(a.listen, a.backends, a.policy);
    if let Some(p) = &a.declared_rates {
        let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
        spec.declared_rates = parse_declared_rates(&text)?;
    }
    let handle = balancer::start(spec)?;
    println!("listening {}", handle.local_addr());
    io::stdout().flush()?;
    wait_for_stop(!a.ignore_stdin)?;
    for asg in handle.assignments() {
        println!(
            "assigned client {} -> backend {}",
            asg.client_id, asg.backend
        );
    }
    handle.stop();
    Ok(true)
}
