//! Connection-level load balancer.
//!
//! Each incoming client connection is pinned to one backend for its whole
//! lifetime. The assignment is made when the CLIENT_HELLO arrives (so the
//! client id is known); afterwards bytes are relayed in both directions
//! untouched. The client-to-backend direction is scanned for frame headers
//! to count REQUEST frames, which feeds the measured-rate signal.

use std::collections::{HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};
use thiserror::Error;

use crate::clock::now_ns;
use crate::proto::{FrameKind, FrameReader, FrameScanner};

#[derive(Debug, Error)]
pub enum BalancerError {
    #[error("balancer needs at least one backend")]
    NoBackends,
    #[error("cannot bind balancer on {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("unknown balancing policy `{0}` (expected round_robin or load_aware)")]
    UnknownPolicy(String),
    #[error("declared rates line {line}: {msg}")]
    DeclaredRates { line: usize, msg: String },
    #[error("no backend reachable for client {0}")]
    Unreachable(u64),
    #[error("balancer i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Policy {
    #[default]
    RoundRobin,
    LoadAware,
}

impl std::str::FromStr for Policy {
    type Err = BalancerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "round_robin" => Ok(Policy::RoundRobin),
            "load_aware" => Ok(Policy::LoadAware),
            other => Err(BalancerError::UnknownPolicy(other.to_string())),
        }
    }
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::RoundRobin => "round_robin",
            Policy::LoadAware => "load_aware",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancerSpec {
    pub listen_address: String,
    pub backends: Vec<String>,
    pub policy: Policy,
    /// Expected QPS per client id, used by `load_aware`.
    pub declared_rates: HashMap<u64, f64>,
    /// Record a timestamp for every relayed REQUEST frame. Off by default.
    pub frame_trace: bool,
}

impl BalancerSpec {
    pub fn new(listen_address: impl Into<String>, backends: Vec<String>, policy: Policy) -> Self {
        BalancerSpec {
            listen_address: listen_address.into(),
            backends,
            policy,
            declared_rates: HashMap::new(),
            frame_trace: false,
        }
    }
}

/// Parse a declared-rates file: one `client_id qps` (or `client_id,qps`)
/// pair per line, `#` comments allowed.
pub fn parse_declared_rates(text: &str) -> Result<HashMap<u64, f64>, BalancerError> {
    let mut out = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| BalancerError::DeclaredRates {
            line: i + 1,
            msg: msg.to_string(),
        };
        let mut parts = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty());
        let id = parts
            .next()
            .and_then(|p| p.parse::<u64>().ok())
            .ok_or_else(|| err("expected a client id"))?;
        let qps = parts
            .next()
            .and_then(|p| p.parse::<f64>().ok())
            .filter(|q| *q >= 0.0 && q.is_finite())
            .ok_or_else(|| err("expected a non-negative rate"))?;
        if parts.next().is_some() {
            return Err(err("trailing fields"));
        }
        out.insert(id, qps);
    }
    Ok(out)
}

/// Connection-to-backend assignment state.
#[derive(Debug, Clone)]
pub struct Assigner {
    policy: Policy,
    backends: usize,
    next_rr: usize,
    declared: HashMap<u64, f64>,
    declared_load: Vec<f64>,
}

impl Assigner {
    pub fn new(policy: Policy, backends: usize, declared: HashMap<u64, f64>) -> Self {
        Assigner {
            policy,
            backends,
            next_rr: 0,
            declared,
            declared_load: vec![0.0; backends],
        }
    }

    /// Per-backend load as seen by `load_aware`: declared rates of live
    /// assigned clients plus `measured` (the measured rate of clients that
    /// declared nothing).
    pub fn loads(&self, measured: &[f64]) -> Vec<f64> {
        (0..self.backends)
            .map(|b| self.declared_load[b] + measured.get(b).copied().unwrap_or(0.0))
            .collect()
    }

    pub fn assign(&mut self, client_id: u64, measured: &[f64]) -> usize {
        let all = vec![true; self.backends];
        self.assign_among(client_id, measured, &all)
            .expect("at least one backend")
    }

    /// Pick a backend among those flagged in `candidates`.
    pub fn assign_among(
        &mut self,
        client_id: u64,
        measured: &[f64],
        candidates: &[bool],
    ) -> Option<usize> {
        let chosen = match self.policy {
            Policy::RoundRobin => {
                let b = (0..self.backends)
                    .map(|k| (self.next_rr + k) % self.backends)
                    .find(|&b| candidates[b])?;
                self.next_rr = (b + 1) % self.backends;
                b
            }
            Policy::LoadAware => {
                let loads = self.loads(measured);
                // strict `<` keeps the lowest index on ties
                let mut best: Option<usize> = None;
                for b in (0..self.backends).filter(|&b| candidates[b]) {
                    if best.is_none_or(|x| loads[b] < loads[x]) {
                        best = Some(b);
                    }
                }
                best?
            }
        };
        if let Some(rate) = self.declared.get(&client_id) {
            self.declared_load[chosen] += rate;
        }
        Some(chosen)
    }

    /// Undo an assignment when the connection ends.
    pub fn release(&mut self, client_id: u64, backend: usize) {
        if let Some(rate) = self.declared.get(&client_id) {
            self.declared_load[backend] = (self.declared_load[backend] - rate).max(0.0);
        }
    }

    pub fn has_declared(&self, client_id: u64) -> bool {
        self.declared.contains_key(&client_id)
    }
}

/// Sliding-window frame rate over the last `window`.
#[derive(Debug)]
pub struct RateMeter {
    window_ns: u64,
    created_ns: u64,
    stamps: Mutex<VecDeque<u64>>,
}

pub const RATE_WINDOW: Duration = Duration::from_secs(5);

impl RateMeter {
    pub fn new(window: Duration) -> Self {
        RateMeter {
            window_ns: window.as_nanos() as u64,
            created_ns: now_ns(),
            stamps: Mutex::new(VecDeque::new()),
        }
    }

    pub fn record(&self, t_ns: u64) {
        let mut s = self.stamps.lock().unwrap();
        s.push_back(t_ns);
        while s.front().is_some_and(|&f| f + self.window_ns < t_ns) {
            s.pop_front();
        }
    }

    /// Frames per second over the window ending at `now`. Young meters
    /// divide by their age instead of the full window.
    pub fn rate_at(&self, now: u64) -> f64 {
        let s = self.stamps.lock().unwrap();
        let from = now.saturating_sub(self.window_ns);
        let count = s.iter().filter(|&&t| t > from && t <= now).count();
        let span = self
            .window_ns
            .min(now.saturating_sub(self.created_ns))
            .max(1);
        count as f64 * 1e9 / span as f64
    }

    pub fn rate(&self) -> f64 {
        self.rate_at(now_ns())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub client_id: u64,
    pub backend: usize,
    pub t_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TracedFrame {
    pub backend: usize,
    pub client_id: u64,
    pub request_id: u64,
    pub t_ns: u64,
}

struct Live {
    id: u64,
    client_id: u64,
    backend: usize,
    declared: bool,
    meter: Arc<RateMeter>,
    client: TcpStream,
    upstream: TcpStream,
}

struct Shared {
    spec: BalancerSpec,
    backends: Vec<SocketAddr>,
    assigner: Mutex<Assigner>,
    live: Mutex<Vec<Live>>,
    next_conn: AtomicU64,
    request_frames: Vec<AtomicU64>,
    bytes_up: Vec<AtomicU64>,
    bytes_down: Vec<AtomicU64>,
    assignments: Mutex<Vec<Assignment>>,
    trace: Mutex<Vec<TracedFrame>>,
    stopped: AtomicBool,
}

impl Shared {
    fn measured_undeclared(&self) -> Vec<f64> {
        let now = now_ns();
        let mut m = vec![0.0; self.backends.len()];
        for l in self.live.lock().unwrap().iter().filter(|l| !l.declared) {
            m[l.backend] += l.meter.rate_at(now);
        }
        m
    }
}

/// A running balancer. Dropping it stops the listener and closes relays.
pub struct BalancerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl BalancerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn assignments(&self) -> Vec<Assignment> {
        self.shared.assignments.lock().unwrap().clone()
    }

    pub fn request_frames(&self) -> Vec<u64> {
        self.shared
            .request_frames
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .collect()
    }

    pub fn bytes_relayed(&self) -> Vec<(u64, u64)> {
        self.shared
            .bytes_up
            .iter()
            .zip(&self.shared.bytes_down)
            .map(|(u, d)| (u.load(Ordering::Relaxed), d.load(Ordering::Relaxed)))
            .collect()
    }

    /// Measured REQUEST rate per backend over the sliding window.
    pub fn measured_rates(&self) -> Vec<f64> {
        let now = now_ns();
        let mut m = vec![0.0; self.shared.backends.len()];
        for l in self.shared.live.lock().unwrap().iter() {
            m[l.backend] += l.meter.rate_at(now);
        }
        m
    }

    pub fn active_connections(&self) -> usize {
        self.shared.live.lock().unwrap().len()
    }

    /// `(client_id, backend)` for every connection currently relayed.
    pub fn live_clients(&self) -> Vec<(u64, usize)> {
        self.shared
            .live
            .lock()
            .unwrap()
            .iter()
            .map(|l| (l.client_id, l.backend))
            .collect()
    }

    pub fn frame_trace(&self) -> Vec<TracedFrame> {
        self.shared.trace.lock().unwrap().clone()
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let Some(accept) = self.accept.take() else {
            return;
        };
        self.shared.stopped.store(true, Ordering::Release);
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(std::net::Ipv4Addr::LOCALHOST.into());
        }
        let _ = TcpStream::connect_timeout(&wake, Duration::from_secs(1));
        for l in self.shared.live.lock().unwrap().iter() {
            let _ = l.client.shutdown(Shutdown::Both);
            let _ = l.upstream.shutdown(Shutdown::Both);
        }
        let _ = accept.join();
    }
}

impl Drop for BalancerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn start(spec: BalancerSpec) -> Result<BalancerHandle, BalancerError> {
    if spec.backends.is_empty() {
        return Err(BalancerError::NoBackends);
    }
    let backends = spec
        .backends
        .iter()
        .map(|b| {
            b.to_socket_addrs()?.next().ok_or_else(|| {
                io::Error::new(
                    io::ErrorKind::AddrNotAvailable,
                    format!("cannot resolve {b}"),
                )
            })
        })
        .collect::<io::Result<Vec<_>>>()?;
    let listener =
        TcpListener::bind(&spec.listen_address).map_err(|source| BalancerError::Bind {
            addr: spec.listen_address.clone(),
            source,
        })?;
    let addr = listener.local_addr()?;
    let n = backends.len();
    let shared = Arc::new(Shared {
        assigner: Mutex::new(Assigner::new(spec.policy, n, spec.declared_rates.clone())),
        spec,
        backends,
        live: Mutex::new(Vec::new()),
        next_conn: AtomicU64::new(0),
        request_frames: (0..n).map(|_| AtomicU64::new(0)).collect(),
        bytes_up: (0..n).map(|_| AtomicU64::new(0)).collect(),
        bytes_down: (0..n).map(|_| AtomicU64::new(0)).collect(),
        assignments: Mutex::new(Vec::new()),
        trace: Mutex::new(Vec::new()),
        stopped: AtomicBool::new(false),
    });
    let accept = {
        let shared = Arc::clone(&shared);
        std::thread::Builder::new()
            .name("balancer-accept".into())
            .spawn(move || accept_loop(listener, shared))?
    };
    debug!("balancer listening on {addr}");
    Ok(BalancerHandle {
        addr,
        shared,
        accept: Some(accept),
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stopped.load(Ordering::Acquire) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let shared = Arc::clone(&shared);
        let _ = std::thread::Builder::new()
            .name("balancer-conn".into())
            .spawn(move || {
                if let Err(e) = proxy(stream, &shared) {
                    debug!("balancer connection ended: {e}");
                }
            });
    }
}

/// Assign and relay one client connection until either side closes.
fn proxy(client: TcpStream, shared: &Shared) -> Result<(), BalancerError> {
    client.set_nodelay(true)?;
    let mut reader = FrameReader::new(client.try_clone()?);
    let hello = match reader.read_frame()? {
        Some(f) if f.kind == FrameKind::ClientHello => f,
        _ => return Ok(()),
    };
    let (_, leftover) = reader.into_parts();
    let client_id = hello.client_id;

    let (backend, upstream) = {
        let mut assigner = shared.assigner.lock().unwrap();
        let measured = shared.measured_undeclared();
        let mut candidates = vec![true; shared.backends.len()];
        loop {
            let Some(b) = assigner.assign_among(client_id, &measured, &candidates) else {
                let _ = client.shutdown(Shutdown::Both);
                return Err(BalancerError::Unreachable(client_id));
            };
            match TcpStream::connect_timeout(&shared.backends[b], Duration::from_secs(5)) {
                Ok(s) => break (b, s),
                Err(e) => {
                    warn!("backend {b} unreachable: {e}");
                    assigner.release(client_id, b);
                    candidates[b] = false;
                }
            }
        }
    };
    upstream.set_nodelay(true)?;
    shared.assignments.lock().unwrap().push(Assignment {
        client_id,
        backend,
        t_ns: now_ns(),
    });
    let conn_id = shared.next_conn.fetch_add(1, Ordering::Relaxed);
    let meter = Arc::new(RateMeter::new(RATE_WINDOW));
    let declared = shared.assigner.lock().unwrap().has_declared(client_id);
    shared.live.lock().unwrap().push(Live {
        id: conn_id,
        client_id,
        backend,
        declared,
        meter: Arc::clone(&meter),
        client: client.try_clone()?,
        upstream: upstream.try_clone()?,
    });

    let down = {
        let from = upstream.try_clone()?;
        let to = client.try_clone()?;
        std::thread::Builder::new()
            .name("balancer-down".into())
            .spawn(move || relay_down(from, to))?
    };
    let mut up_bytes = 0u64;
    let result = relay_up(
        &client,
        &upstream,
        hello.encode().expect("hello encodes"),
        leftover,
        |n| up_bytes += n as u64,
        |h_kind, rid| {
            if h_kind == FrameKind::Request {
                let t = now_ns();
                meter.record(t);
                shared.request_frames[backend].fetch_add(1, Ordering::Relaxed);
                if shared.spec.frame_trace {
                    shared.trace.lock().unwrap().push(TracedFrame {
                        backend,
                        client_id,
                        request_id: rid,
                        t_ns: t,
                    });
                }
            }
        },
    );
    shared.bytes_up[backend].fetch_add(up_bytes, Ordering::Relaxed);
    let _ = upstream.shutdown(Shutdown::Both);
    let _ = client.shutdown(Shutdown::Both);
    if let Ok(n) = down.join() {
        shared.bytes_down[backend].fetch_add(n, Ordering::Relaxed);
    }
    shared.live.lock().unwrap().retain(|l| l.id != conn_id);
    shared.assigner.lock().unwrap().release(client_id, backend);
    debug!("client {client_id} on backend {backend} closed");
    result.map_err(BalancerError::from)
}

/// Backend-to-client copy; returns the byte count.
fn relay_down(mut from: TcpStream, mut to: TcpStream) -> u64 {
    let mut buf = [0u8; 16 * 1024];
    let mut total = 0u64;
    loop {
        match from.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if to.write_all(&buf[..n]).is_err() {
                    break;
                }
                total += n as u64;
            }
        }
    }
    let _ = to.shutdown(Shutdown::Both);
    let _ = from.shutdown(Shutdown::Both);
    total
}

fn relay_up(
    mut from: &TcpStream,
    mut to: &TcpStream,
    hello: Vec<u8>,
    leftover: Vec<u8>,
    mut on_bytes: impl FnMut(usize),
    mut on_frame: impl FnMut(FrameKind, u64),
) -> io::Result<()> {
    let mut scanner = FrameScanner::new();
    let mut forward = |bytes: &[u8], scanner: &mut FrameScanner| -> io::Result<()> {
        scanner
            .feed(bytes, |h| on_frame(h.kind, h.request_id))
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        to.write_all(bytes)?;
        on_bytes(bytes.len());
        Ok(())
    };
    forward(&hello, &mut scanner)?;
    if !leftover.is_empty() {
        forward(&leftover, &mut scanner)?;
    }
    let mut buf = [0u8; 16 * 1024];
    loop {
        match from.read(&mut buf) {
            Ok(0) => return Ok(()),
            Ok(n) => forward(&buf[..n], &mut scanner)?,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
}
