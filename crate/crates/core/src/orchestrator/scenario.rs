//! Scenario files.
//!
//! A flat, line-oriented format: `[section]` headers followed by
//! `key = value` lines; `#` starts a comment. Sections:
//!
//! ```text
//! [scenario]            name, repetitions (13), window_s (1), exclude_warmup (false)
//! [server <name>]       id, listen, workers (1), queue_capacity (unbounded),
//!                       workload, mean_service_us, sigma, item_count,
//!                       zipf_exponent, seed (0), mode (in_process | process)
//! [balancer]            listen, backends (server names), policy,
//!                       declared_rates (client_id:qps, ...)
//! [client <name>]       id, target (server name or `balancer`),
//!                       start_delay_s (0), total_requests, schedule
//!                       (start_s:qps, ...), sender_threads (1), seed,
//!                       arrival (stratified | poisson)
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use crate::balancer::Policy;
use crate::client::ClientSpec;
use crate::schedule::{ArrivalProcess, QpsSchedule};
use crate::server::{QueueCapacity, ServerSpec};
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub file: Option<String>,
    /// 1-based; 0 when the error is not tied to a line.
    pub line: usize,
    pub msg: String,
}

impl ParseError {
    pub fn new(line: usize, msg: impl Into<String>) -> Self {
        ParseError {
            file: None,
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn in_file(mut self, path: &Path) -> Self {
        self.file.get_or_insert_with(|| path.display().to_string());
        self
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.file, self.line) {
            (Some(file), 0) => write!(f, "{file}: {}", self.msg),
            (Some(file), l) => write!(f, "{file}:{l}: {}", self.msg),
            (None, 0) => f.write_str(&self.msg),
            (None, l) => write!(f, "line {l}: {}", self.msg),
        }
    }
}

impl std::error::Error for ParseError {}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError::new(line, msg))
}

/// How a server is hosted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LaunchMode {
    #[default]
    InProcess,
    Process,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioServer {
    pub name: String,
    pub spec: ServerSpec,
    pub mode: LaunchMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBalancer {
    pub listen_address: String,
    /// Indices into `ScenarioSpec::servers`.
    pub backends: Vec<usize>,
    pub policy: Policy,
    pub declared_rates: HashMap<u64, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Server(usize),
    Balancer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioClient {
    pub name: String,
    pub target: Target,
    /// `target_address` is filled in when the scenario runs.
    pub spec: ClientSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub servers: Vec<ScenarioServer>,
    pub balancer: Option<ScenarioBalancer>,
    pub clients: Vec<ScenarioClient>,
    pub repetitions: u32,
    pub window_s: f64,
    /// Drop each client's first second of samples from the statistics.
    pub exclude_warmup: bool,
}

pub const DEFAULT_REPETITIONS: u32 = 13;

impl ScenarioSpec {
    pub fn server_index(&self, name: &str) -> Option<usize> {
        self.servers.iter().position(|s| s.name == name)
    }

    pub fn client_by_id(&self, id: u64) -> Option<&ScenarioClient> {
        self.clients.iter().find(|c| c.spec.client_id == id)
    }

    /// Replace every client's schedule with a constant `qps`; when
    /// `duration_s` is given, budgets become `qps * duration_s`. Declared
    /// balancer rates follow the new rate.
    pub fn with_uniform_qps(&self, qps: f64, duration_s: Option<f64>) -> ScenarioSpec {
        let mut s = self.clone();
        for c in &mut s.clients {
            c.spec.schedule = QpsSchedule::constant(qps).expect("positive qps");
            if let Some(d) = duration_s {
                c.spec.total_requests = ((qps * d).round() as u64).max(1);
            }
        }
        if let Some(b) = &mut s.balancer {
            for rate in b.declared_rates.values_mut() {
                *rate = qps;
            }
        }
        s
    }

    /// Shift every seed (workload and arrivals) by `offset`, so repetitions
    /// draw fresh but reproducible sequences.
    pub fn reseeded(&self, offset: u64) -> ScenarioSpec {
        let mut s = self.clone();
        for sv in &mut s.servers {
            sv.spec.workload.seed = sv.spec.workload.seed.wrapping_add(offset);
        }
        for c in &mut s.clients {
            c.spec.seed = c.spec.seed.wrapping_add(offset);
        }
        s
    }
}

/// Raw parsed file: sections with located key/value pairs.
#[derive(Debug)]
pub(crate) struct Section {
    pub kind: String,
    pub name: Option<String>,
    pub line: usize,
    pub entries: Vec<(String, String, usize)>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.as_str(), *l))
    }

    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), ParseError> {
        let mut seen = HashSet::new();
        for (k, _, line) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return err(
                    *line,
                    format!(
                        "unknown key `{k}` in [{}] (allowed: {})",
                        self.kind,
                        allowed.join(", ")
                    ),
                );
            }
            if !seen.insert(k) {
                return err(*line, format!("duplicate key `{k}`"));
            }
        }
        Ok(())
    }

    pub fn required(&self, key: &str) -> Result<(&str, usize), ParseError> {
        self.get(key).ok_or_else(|| {
            ParseError::new(
                self.line,
                format!("[{}] is missing required key `{key}`", self.header()),
            )
        })
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ParseError> {
        match self.get(key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .or_else(|_| err(line, format!("invalid value `{v}` for `{key}`"))),
        }
    }

    pub fn parse_required<T: std::str::FromStr>(&self, key: &str) -> Result<T, ParseError> {
        let (v, line) = self.required(key)?;
        v.parse()
            .or_else(|_| err(line, format!("invalid value `{v}` for `{key}`")))
    }

    fn header(&self) -> String {
        match &self.name {
            Some(n) => format!("{} {n}", self.kind),
            None => self.kind.clone(),
        }
    }
}

pub(crate) fn parse_sections(text: &str) -> Result<Vec<Section>, ParseError> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let Some(inner) = inner.strip_suffix(']') else {
                return err(line_no, "unterminated section header");
            };
            let mut parts = inner.split_whitespace();
            let kind = parts.next().unwrap_or("").to_string();
            let name = parts.next().map(str::to_string);
            if parts.next().is_some() {
                return err(line_no, "section header takes at most a kind and a name");
            }
            if kind.is_empty() {
                return err(line_no, "empty section header");
            }
            sections.push(Section {
                kind,
                name,
                line: line_no,
                entries: Vec::new(),
            });
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return err(line_no, format!("expected `key = value`, got `{line}`"));
        };
        let Some(section) = sections.last_mut() else {
            return err(line_no, "key outside of any section");
        };
        section
            .entries
            .push((k.trim().to_string(), v.trim().to_string(), line_no));
    }
    Ok(sections)
}

const SCENARIO_KEYS: &[&str] = &["name", "repetitions", "window_s", "exclude_warmup"];
const SERVER_KEYS: &[&str] = &[
    "id",
    "listen",
    "workers",
    "queue_capacity",
    "workload",
    "mean_service_us",
    "sigma",
    "item_count",
    "zipf_exponent",
    "seed",
    "mode",
];
const BALANCER_KEYS: &[&str] = &["listen", "backends", "policy", "declared_rates"];
const CLIENT_KEYS: &[&str] = &[
    "id",
    "target",
    "start_delay_s",
    "total_requests",
    "schedule",
    "sender_threads",
    "seed",
    "arrival",
];

fn parse_server(s: &Section, index: usize) -> Result<ScenarioServer, ParseError> {
    s.check_keys(SERVER_KEYS)?;
    let name = s
        .name
        .clone()
        .ok_or_else(|| ParseError::new(s.line, "[server] needs a name, e.g. [server s0]"))?;
    let (dist, dist_line) = s.required("workload")?;
    let mean: f64 = s.parse_required("mean_service_us")?;
    let seed: u64 = s.parse_or("seed", 0)?;
    let mut params = HashMap::new();
    for key in ["sigma", "item_count", "zipf_exponent"] {
        if s.get(key).is_some() {
            params.insert(key, s.parse_required::<f64>(key)?);
        }
    }
    let workload = WorkloadSpec::from_name(dist, mean, seed, |k| params.get(k).copied())
        .or_else(|e| err(dist_line, e.to_string()))?;
    let workers: usize = s.parse_or("workers", 1)?;
    if workers == 0 {
        return err(
            s.get("workers").map_or(s.line, |x| x.1),
            "workers must be at least 1",
        );
    }
    let queue_capacity = match s.get("queue_capacity") {
        None | Some(("unbounded", _)) => QueueCapacity::Unbounded,
        Some((v, line)) => match v.parse::<usize>() {
            Ok(n) if n > 0 => QueueCapacity::Bounded(n),
            _ => {
                return err(
                    line,
                    format!("queue_capacity must be `unbounded` or a positive integer, got `{v}`"),
                )
            }
        },
    };
    let mode = match s.get("mode") {
        None | Some(("in_process", _)) => LaunchMode::InProcess,
        Some(("process", _)) => LaunchMode::Process,
        Some((v, line)) => {
            return err(
                line,
                format!("mode must be in_process or process, got `{v}`"),
            )
        }
    };
    let id: u32 = s.parse_or("id", index as u32)?;
    let listen = s.get("listen").map_or("127.0.0.1:0", |x| x.0).to_string();
    let mut spec = ServerSpec::new(id, listen, workload);
    spec.workers = workers;
    spec.queue_capacity = queue_capacity;
    Ok(ScenarioServer { name, spec, mode })
}

fn parse_rate_map(v: &str, line: usize) -> Result<HashMap<u64, f64>, ParseError> {
    let mut out = HashMap::new();
    for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let parsed = part.split_once(':').and_then(|(id, q)| {
            Some((
                id.trim().parse::<u64>().ok()?,
                q.trim().parse::<f64>().ok()?,
            ))
        });
        match parsed {
            Some((id, q)) if q >= 0.0 && q.is_finite() => {
                out.insert(id, q);
            }
            _ => {
                return err(
                    line,
                    format!("malformed declared rate `{part}` (expected client_id:qps)"),
                )
            }
        }
    }
    Ok(out)
}

pub fn parse_scenario_str(text: &str) -> Result<ScenarioSpec, ParseError> {
    let sections = parse_sections(text)?;
    let mut meta: Option<&Section> = None;
    let mut servers = Vec::new();
    let mut balancer_sec: Option<&Section> = None;
    let mut client_secs = Vec::new();
    for s in &sections {
        match s.kind.as_str() {
            "scenario" => {
                if meta.replace(s).is_some() {
                    return err(s.line, "duplicate [scenario] section");
                }
            }
            "server" => servers.push(parse_server(s, servers.len())?),
            "balancer" => {
                if balancer_sec.replace(s).is_some() {
                    return err(s.line, "only one [balancer] section is allowed");
                }
            }
            "client" => client_secs.push(s),
            other => return err(s.line, format!("unknown section [{other}]")),
        }
    }
    let Some(meta) = meta else {
        return err(0, "missing [scenario] section");
    };
    meta.check_keys(SCENARIO_KEYS)?;
    let name = meta.required("name")?.0.to_string();
    let repetitions: u32 = meta.parse_or("repetitions", DEFAULT_REPETITIONS)?;
    if repetitions == 0 {
        return err(
            meta.get("repetitions").unwrap().1,
            "repetitions must be positive",
        );
    }
    let window_s: f64 = meta.parse_or("window_s", 1.0)?;
    if !(window_s > 0.0) {
        return err(meta.get("window_s").unwrap().1, "window_s must be positive");
    }
    let exclude_warmup: bool = meta.parse_or("exclude_warmup", false)?;

    if servers.is_empty() {
        return err(0, "scenario needs at least one [server]");
    }
    let mut names = HashSet::new();
    let mut ids = HashSet::new();
    for (sv, sec) in servers
        .iter()
        .zip(sections.iter().filter(|s| s.kind == "server"))
    {
        if !names.insert(sv.name.clone()) {
            return err(sec.line, format!("duplicate server name `{}`", sv.name));
        }
        if !ids.insert(sv.spec.server_id) {
            return err(
                sec.line,
                format!("duplicate server id {}", sv.spec.server_id),
            );
        }
    }
    let server_index = |name: &str| servers.iter().position(|s| s.name == name);

    let balancer = match balancer_sec {
        None => None,
        Some(b) => {
            b.check_keys(BALANCER_KEYS)?;
            let listen = b.get("listen").map_or("127.0.0.1:0", |x| x.0).to_string();
            let backends = match b.get("backends") {
                None => (0..servers.len()).collect(),
                Some((v, line)) => v
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|n| {
                        server_index(n).ok_or_else(|| {
                            ParseError::new(
                                line,
                                format!("balancer backend `{n}` is not a declared server"),
                            )
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            };
            if backends.is_empty() {
                return err(b.line, "balancer needs at least one backend");
            }
            let policy = match b.get("policy") {
                None => Policy::RoundRobin,
                Some((v, line)) => v
                    .parse()
                    .or_else(|e: crate::balancer::BalancerError| err(line, e.to_string()))?,
            };
            let declared_rates = match b.get("declared_rates") {
                None => HashMap::new(),
                Some((v, line)) => parse_rate_map(v, line)?,
            };
            Some(ScenarioBalancer {
                listen_address: listen,
                backends,
                policy,
                declared_rates,
            })
        }
    };

    let mut clients = Vec::new();
    let mut client_names = HashSet::new();
    let mut client_ids = HashSet::new();
    for (i, c) in client_secs.iter().enumerate() {
        c.check_keys(CLIENT_KEYS)?;
        let name = c
            .name
            .clone()
            .ok_or_else(|| ParseError::new(c.line, "[client] needs a name, e.g. [client c1]"))?;
        if !client_names.insert(name.clone()) {
            return err(c.line, format!("duplicate client name `{name}`"));
        }
        let id: u64 = c.parse_or("id", i as u64 + 1)?;
        if !client_ids.insert(id) {
            return err(c.line, format!("duplicate client id {id}"));
        }
        let (t, tline) = c.required("target")?;
        let target = if t == "balancer" {
            if balancer.is_none() {
                return err(
                    tline,
                    "client targets `balancer` but no [balancer] is declared",
                );
            }
            Target::Balancer
        } else {
            Target::Server(server_index(t).ok_or_else(|| {
                ParseError::new(
                    tline,
                    format!("client target `{t}` is not a declared server"),
                )
            })?)
        };
        let total_requests: u64 = c.parse_required("total_requests")?;
        if total_requests == 0 {
            return err(
                c.get("total_requests").unwrap().1,
                "total_requests must be at least 1",
            );
        }
        let start_delay_s: f64 = c.parse_or("start_delay_s", 0.0)?;
        if !(start_delay_s >= 0.0 && start_delay_s.is_finite()) {
            return err(
                c.get("start_delay_s").unwrap().1,
                "start_delay_s must be non-negative",
            );
        }
        let (sched, sline) = c.required("schedule")?;
        let schedule =
            QpsSchedule::parse(sched).or_else(|e| err(sline, format!("schedule: {e}")))?;
        let sender_threads: usize = c.parse_or("sender_threads", 1)?;
        if sender_threads == 0 {
            return err(
                c.get("sender_threads").unwrap().1,
                "sender_threads must be at least 1",
            );
        }
        let arrival = match c.get("arrival") {
            None => ArrivalProcess::default(),
            Some((v, line)) => ArrivalProcess::parse(v).ok_or_else(|| {
                ParseError::new(
                    line,
                    format!("arrival must be stratified or poisson, got `{v}`"),
                )
            })?,
        };
        let mut spec = ClientSpec::new(id, String::new(), total_requests, schedule);
        spec.start_delay_s = start_delay_s;
        spec.sender_threads = sender_threads;
        spec.seed = c.parse_or("seed", id)?;
        spec.arrival = arrival;
        clients.push(ScenarioClient { name, target, spec });
    }
    if clients.is_empty() {
        return err(0, "scenario needs at least one [client]");
    }
    Ok(ScenarioSpec {
        name,
        servers,
        balancer,
        clients,
        repetitions,
        window_s,
        exclude_warmup,
    })
}

pub fn parse_scenario(path: &Path) -> Result<ScenarioSpec, ParseError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ParseError::new(0, e.to_string()).in_file(path))?;
    parse_scenario_str(&text).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "
[scenario]
name = t
[server s0]
workload = fixed
mean_service_us = 100
[client c1]
target = s0
total_requests = 10
schedule = 0:100
";

    #[test]
    fn defaults_filled() {
        let s = parse_scenario_str(BASE).unwrap();
        assert_eq!(s.repetitions, 13);
        assert_eq!(s.window_s, 1.0);
        assert_eq!(s.servers[0].spec.workers, 1);
        assert_eq!(s.servers[0].spec.server_id, 0);
        assert_eq!(s.clients[0].spec.client_id, 1);
        assert_eq!(s.clients[0].target, Target::Server(0));
        assert_eq!(s.servers[0].mode, LaunchMode::InProcess);
    }

    #[test]
    fn dangling_target() {
        let e = parse_scenario_str(&BASE.replace("target = s0", "target = s9")).unwrap_err();
        assert_eq!(e.line, 8);
        assert!(e.msg.contains("s9"));
        let e = parse_scenario_str(&BASE.replace("target = s0", "target = balancer")).unwrap_err();
        assert!(e.msg.contains("no [balancer]"));
    }

    #[test]
    fn unknown_key_located() {
        let e = parse_scenario_str(&BASE.replace("total_requests = 10", "total_reqs = 10"))
            .unwrap_err();
        assert_eq!(e.line, 9);
        assert!(e.msg.contains("unknown key `total_reqs`"), "{e}");
    }

    #[test]
    fn zero_budget_rejected() {
        let e = parse_scenario_str(&BASE.replace("total_requests = 10", "total_requests = 0"))
            .unwrap_err();
        assert_eq!(e.line, 9);
    }

    #[test]
    fn schedule_violation_located() {
        let e = parse_scenario_str(&BASE.replace("0:100", "0:100, 0:200")).unwrap_err();
        assert_eq!(e.line, 10);
        let e = parse_scenario_str(&BASE.replace("0:100", "5:100")).unwrap_err();
        assert!(e.msg.contains("start at 0"));
    }

    #[test]
    fn unknown_workload_and_section() {
        let e = parse_scenario_str(&BASE.replace("fixed", "pareto")).unwrap_err();
        assert_eq!(e.line, 5);
        let e = parse_scenario_str(&format!("{BASE}\n[extra]\n")).unwrap_err();
        assert!(e.msg.contains("unknown section"));
    }

    #[test]
    fn balancer_references() {
        let text = format!("{BASE}\n[balancer]\nbackends = s0, s1\n");
        let e = parse_scenario_str(&text).unwrap_err();
        assert!(e.msg.contains("`s1`"));
        let text = format!(
            "{}\n[balancer]\npolicy = load_aware\ndeclared_rates = 1:500\n",
            BASE.replace("target = s0", "target = balancer")
        );
        let s = parse_scenario_str(&text).unwrap();
        let b = s.balancer.unwrap();
        assert_eq!(b.policy, Policy::LoadAware);
        assert_eq!(b.backends, vec![0]);
        assert_eq!(b.declared_rates[&1], 500.0);
    }

    #[test]
    fn duplicate_key_and_missing_required() {
        let e = parse_scenario_str(&BASE.replace(
            "total_requests = 10",
            "total_requests = 10\ntotal_requests = 11",
        ))
        .unwrap_err();
        assert!(e.msg.contains("duplicate key"));
        let e = parse_scenario_str(&BASE.replace("schedule = 0:100", "")).unwrap_err();
        assert!(e.msg.contains("missing required key `schedule`"));
        assert_eq!(e.line, 7);
    }

    #[test]
    fn uniform_qps_rewrites_budgets() {
        let s = parse_scenario_str(BASE)
            .unwrap()
            .with_uniform_qps(250.0, Some(4.0));
        assert_eq!(s.clients[0].spec.total_requests, 1000);
        assert_eq!(s.clients[0].spec.schedule.current_rate(100.0), 250.0);
    }
}
