//! Persistent server runtime.
//!
//! A server starts with zero clients, admits new connections at any time,
//! idles (blocked, not polling) when nobody is connected, and only exits on
//! an explicit stop. Layout: one accept thread, one reader thread per
//! connection feeding a single FIFO queue, and `workers` executor threads.

use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{select, Receiver, Sender, TrySendError};
use log::{debug, warn};
use thiserror::Error;

use crate::clock::now_ns;
use crate::proto::{write_frame, Frame, FrameKind, FrameReader, ResponsePayload};
use crate::workload::{ServiceSampler, Spinner, WorkloadError, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("server {id}: cannot bind {addr}: {source}")]
    Bind {
        id: u32,
        addr: String,
        source: io::Error,
    },
    #[error("server needs at least one worker")]
    NoWorkers,
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("server i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueueCapacity {
    #[default]
    Unbounded,
    Bounded(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerSpec {
    pub server_id: u32,
    pub listen_address: String,
    pub workers: usize,
    pub workload: WorkloadSpec,
    pub queue_capacity: QueueCapacity,
    /// Where to write the per-server CSV event log on shutdown.
    pub event_log: Option<PathBuf>,
}

impl ServerSpec {
    pub fn new(server_id: u32, listen_address: impl Into<String>, workload: WorkloadSpec) -> Self {
        ServerSpec {
            server_id,
            listen_address: listen_address.into(),
            workers: 1,
            workload,
            queue_capacity: QueueCapacity::Unbounded,
            event_log: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Join,
    Leave,
    Served,
    Dropped,
    Rejected,
}

impl EventKind {
    fn as_str(self) -> &'static str {
        match self {
            EventKind::Join => "join",
            EventKind::Leave => "leave",
            EventKind::Served => "served",
            EventKind::Dropped => "dropped",
            EventKind::Rejected => "rejected",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            EventKind::Join,
            EventKind::Leave,
            EventKind::Served,
            EventKind::Dropped,
            EventKind::Rejected,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerEvent {
    pub kind: EventKind,
    pub t_ns: u64,
    pub client_id: u64,
    pub request_id: u64,
    pub timings: ResponsePayload,
}

pub const EVENT_LOG_HEADER: &str =
    "event,t_ns,client_id,request_id,server_recv_ns,service_start_ns,service_end_ns";

pub fn write_event_log<W: Write>(mut w: W, events: &[ServerEvent]) -> io::Result<()> {
    writeln!(w, "{EVENT_LOG_HEADER}")?;
    for e in events {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            e.kind.as_str(),
            e.t_ns,
            e.client_id,
            e.request_id,
            e.timings.server_recv_ns,
            e.timings.service_start_ns,
            e.timings.service_end_ns
        )?;
    }
    w.flush()
}

/// Read an event log written by `write_event_log`. `server_id` is not in
/// the file and is filled from the argument.
pub fn read_event_log<R: BufRead>(server_id: u32, r: R) -> io::Result<Vec<ServerEvent>> {
    let bad = |line: usize, msg: &str| {
        io::Error::new(
            io::ErrorKind::InvalidData,
            format!("event log line {line}: {msg}"),
        )
    };
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != EVENT_LOG_HEADER {
                return Err(bad(1, "unexpected header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(i + 1, "expected 7 fields"));
        }
        let kind = EventKind::parse(f[0]).ok_or_else(|| bad(i + 1, "unknown event"))?;
        let mut n = [0u64; 6];
        for (slot, text) in n.iter_mut().zip(&f[1..]) {
            *slot = text.parse().map_err(|_| bad(i + 1, "bad number"))?;
        }
        out.push(ServerEvent {
            kind,
            t_ns: n[0],
            client_id: n[1],
            request_id: n[2],
            timings: ResponsePayload {
                server_recv_ns: n[3],
                service_start_ns: n[4],
                service_end_ns: n[5],
                server_id,
            },
        });
    }
    Ok(out)
}

/// Write side of one client connection, shared by the workers that answer it.
#[derive(Debug)]
pub struct Connection {
    client_id: u64,
    writer: Mutex<TcpStream>,
    open: AtomicBool,
}

impl Connection {
    pub fn client_id(&self) -> u64 {
        self.client_id
    }

    pub fn is_open(&self) -> bool {
        self.open.load(Ordering::Acquire)
    }

    fn close(&self) {
        self.open.store(false, Ordering::Release);
        if let Ok(w) = self.writer.lock() {
            let _ = w.shutdown(Shutdown::Both);
        }
    }
}

/// A request waiting in the server FIFO.
#[derive(Debug)]
pub struct QueuedRequest {
    pub frame: Frame,
    /// Stamped when the frame was read off the socket.
    pub enqueue_ns: u64,
    pub service_time: Duration,
    pub conn: Arc<Connection>,
}

#[derive(Debug)]
enum Admission {
    Joined(u64),
    Left(u64),
}

/// Shared server state: client accounting, the request FIFO and counters.
#[derive(Debug)]
pub struct ServerState {
    server_id: u32,
    active_clients: AtomicUsize,
    served_total: AtomicU64,
    drops: AtomicU64,
    rejected: AtomicU64,
    queue_tx: Sender<QueuedRequest>,
    queue_rx: Receiver<QueuedRequest>,
    admission_tx: Sender<Admission>,
    admission_rx: Receiver<Admission>,
    stop_tx: Mutex<Option<Sender<()>>>,
    stop_rx: Receiver<()>,
    events: Option<Mutex<Vec<ServerEvent>>>,
}

impl ServerState {
    pub fn new(server_id: u32, capacity: QueueCapacity, record_events: bool) -> Self {
        let (queue_tx, queue_rx) = match capacity {
            QueueCapacity::Unbounded => crossbeam_channel::unbounded(),
            QueueCapacity::Bounded(n) => crossbeam_channel::bounded(n.max(1)),
        };
        let (admission_tx, admission_rx) = crossbeam_channel::unbounded();
        let (stop_tx, stop_rx) = crossbeam_channel::bounded(0);
        ServerState {
            server_id,
            active_clients: AtomicUsize::new(0),
            served_total: AtomicU64::new(0),
            drops: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
            queue_tx,
            queue_rx,
            admission_tx,
            admission_rx,
            stop_tx: Mutex::new(Some(stop_tx)),
            stop_rx,
            events: record_events.then(|| Mutex::new(Vec::new())),
        }
    }

    pub fn server_id(&self) -> u32 {
        self.server_id
    }

    /// Fold every pending admission event into the client count. Never
    /// blocks; returns how many clients joined.
    pub fn check_new_clients(&self) -> usize {
        let mut joined = 0;
        for ev in self.admission_rx.try_iter() {
            joined += self.apply(ev);
        }
        joined
    }

    fn apply(&self, ev: Admission) -> usize {
        match ev {
            Admission::Joined(id) => {
                self.active_clients.fetch_add(1, Ordering::AcqRel);
                self.record(EventKind::Join, id, 0, ResponsePayload::default());
                1
            }
            Admission::Left(id) => {
                self.active_clients.fetch_sub(1, Ordering::AcqRel);
                self.record(EventKind::Leave, id, 0, ResponsePayload::default());
                0
            }
        }
    }

    pub fn active_clients(&self) -> usize {
        self.check_new_clients();
        self.active_clients.load(Ordering::Acquire)
    }

    pub fn served_total(&self) -> u64 {
        self.served_total.load(Ordering::Relaxed)
    }

    pub fn drops(&self) -> u64 {
        self.drops.load(Ordering::Relaxed)
    }

    pub fn rejected(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }

    pub fn queue_len(&self) -> usize {
        self.queue_rx.len()
    }

    /// Append a request to the FIFO. Fails only when a bounded queue is full.
    pub fn enqueue(&self, req: QueuedRequest) -> Result<(), QueuedRequest> {
        match self.queue_tx.try_send(req) {
            Ok(()) => Ok(()),
            Err(TrySendError::Full(req)) | Err(TrySendError::Disconnected(req)) => {
                self.rejected.fetch_add(1, Ordering::Relaxed);
                self.record(
                    EventKind::Rejected,
                    req.frame.client_id,
                    req.frame.request_id,
                    ResponsePayload::default(),
                );
                Err(req)
            }
        }
    }

    /// Next request in arrival order. Blocks while the queue is empty,
    /// including when no client is connected; returns `None` only after stop.
    pub fn recv_req(&self) -> Option<QueuedRequest> {
        loop {
            self.check_new_clients();
            select! {
                recv(self.queue_rx) -> req => return req.ok(),
                recv(self.admission_rx) -> ev => {
                    if let Ok(ev) = ev {
                        self.apply(ev);
                    }
                }
                recv(self.stop_rx) -> _ => return None,
            }
        }
    }

    /// Deliver the RESPONSE for `req`. A response for a vanished client is
    /// dropped and counted.
    pub fn send_resp(&self, req: &QueuedRequest, timings: ResponsePayload) {
        self.served_total.fetch_add(1, Ordering::Relaxed);
        let frame = Frame::response(&req.frame, &timings);
        let delivered = req.conn.is_open()
            && match req.conn.writer.lock() {
                Ok(mut w) => write_frame(&mut *w, &frame).is_ok(),
                Err(_) => false,
            };
        let kind = if delivered {
            EventKind::Served
        } else {
            self.drops.fetch_add(1, Ordering::Relaxed);
            EventKind::Dropped
        };
        self.record(kind, req.frame.client_id, req.frame.request_id, timings);
    }

    pub fn is_stopped(&self) -> bool {
        self.stop_tx.lock().map(|s| s.is_none()).unwrap_or(true)
    }

    fn signal_stop(&self) {
        if let Ok(mut s) = self.stop_tx.lock() {
            s.take();
        }
    }

    fn record(&self, kind: EventKind, client_id: u64, request_id: u64, timings: ResponsePayload) {
        if let Some(events) = &self.events {
            let ev = ServerEvent {
                kind,
                t_ns: now_ns(),
                client_id,
                request_id,
                timings,
            };
            if let Ok(mut v) = events.lock() {
                v.push(ev);
            }
        }
    }

    pub fn events(&self) -> Vec<ServerEvent> {
        match &self.events {
            Some(e) => e.lock().map(|v| v.clone()).unwrap_or_default(),
            None => Vec::new(),
        }
    }
}

/// Final counters reported when a server stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerStats {
    pub server_id: u32,
    pub served_total: u64,
    pub drops: u64,
    pub rejected: u64,
}

/// A running server. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    spec: ServerSpec,
    state: Arc<ServerState>,
    conns: Arc<Mutex<Vec<Weak<Connection>>>>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn server_id(&self) -> u32 {
        self.spec.server_id
    }

    pub fn state(&self) -> &Arc<ServerState> {
        &self.state
    }

    pub fn active_clients(&self) -> usize {
        self.state.active_clients()
    }

    pub fn stats(&self) -> ServerStats {
        ServerStats {
            server_id: self.spec.server_id,
            served_total: self.state.served_total(),
            drops: self.state.drops(),
            rejected: self.state.rejected(),
        }
    }

    /// Stop accepting, close every connection, join all threads and write
    /// the event log if one was configured.
    pub fn stop(mut self) -> Result<ServerStats, ServerError> {
        self.shutdown();
        if let Some(path) = &self.spec.event_log {
            let f = BufWriter::new(File::create(path)?);
            write_event_log(f, &self.state.events())?;
        }
        Ok(self.stats())
    }

    fn shutdown(&mut self) {
        if self.threads.is_empty() {
            return;
        }
        self.state.signal_stop();
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&wake_addr(self.addr), Duration::from_secs(1));
        if let Ok(conns) = self.conns.lock() {
            for c in conns.iter().filter_map(Weak::upgrade) {
                c.close();
            }
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn wake_addr(addr: SocketAddr) -> SocketAddr {
    let mut a = addr;
    if a.ip().is_unspecified() {
        a.set_ip(match a {
            SocketAddr::V4(_) => std::net::Ipv4Addr::LOCALHOST.into(),
            SocketAddr::V6(_) => std::net::Ipv6Addr::LOCALHOST.into(),
        });
    }
    a
}

/// Bind and start serving in background threads.
pub fn start(spec: ServerSpec) -> Result<ServerHandle, ServerError> {
    if spec.workers == 0 {
        return Err(ServerError::NoWorkers);
    }
    spec.workload.validate()?;
    let listener = TcpListener::bind(&spec.listen_address).map_err(|source| ServerError::Bind {
        id: spec.server_id,
        addr: spec.listen_address.clone(),
        source,
    })?;
    let addr = listener.local_addr()?;
    let state = Arc::new(ServerState::new(
        spec.server_id,
        spec.queue_capacity,
        spec.event_log.is_some(),
    ));
    let conns: Arc<Mutex<Vec<Weak<Connection>>>> = Arc::default();
    let spinner = Spinner::calibrate();
    debug!(
        "server {} listening on {addr}, {} spin iterations per chunk",
        spec.server_id,
        spinner.iters_per_chunk()
    );

    let mut threads = Vec::with_capacity(spec.workers + 1);
    for w in 0..spec.workers {
        let state = Arc::clone(&state);
        threads.push(
            std::thread::Builder::new()
                .name(format!("server{}-worker{w}", spec.server_id))
                .spawn(move || worker_loop(&state, spinner))?,
        );
    }
    {
        let state = Arc::clone(&state);
        let conns = Arc::clone(&conns);
        let workload = spec.workload.clone();
        threads.push(
            std::thread::Builder::new()
                .name(format!("server{}-accept", spec.server_id))
                .spawn(move || accept_loop(listener, state, conns, workload))?,
        );
    }
    Ok(ServerHandle {
        addr,
        spec,
        state,
        conns,
        threads,
    })
}

/// Serve until `stop` fires (a message or a disconnect), then shut down.
pub fn run(spec: ServerSpec, stop: Receiver<()>) -> Result<ServerStats, ServerError> {
    let handle = start(spec)?;
    let _ = stop.recv();
    handle.stop()
}

fn worker_loop(state: &ServerState, spinner: Spinner) {
    while let Some(req) = state.recv_req() {
        let service_start_ns = now_ns();
        // service_time is positive by construction
        let _ = spinner.execute(req.service_time);
        let service_end_ns = now_ns();
        let timings = ResponsePayload {
            server_recv_ns: req.enqueue_ns.min(service_start_ns),
            service_start_ns,
            service_end_ns,
            server_id: state.server_id(),
        };
        state.send_resp(&req, timings);
    }
}

fn accept_loop(
    listener: TcpListener,
    state: Arc<ServerState>,
    conns: Arc<Mutex<Vec<Weak<Connection>>>>,
    workload: WorkloadSpec,
) {
    for stream in listener.incoming() {
        if state.is_stopped() {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("server {}: accept failed: {e}", state.server_id());
                continue;
            }
        };
        let state = Arc::clone(&state);
        let conns = Arc::clone(&conns);
        let workload = workload.clone();
        let spawned = std::thread::Builder::new()
            .name(format!("server{}-conn", state.server_id()))
            .spawn(move || {
                if let Err(e) = serve_connection(stream, &state, &conns, &workload) {
                    debug!("server {}: connection ended: {e}", state.server_id());
                }
            });
        if let Err(e) = spawned {
            warn!("cannot spawn connection thread: {e}");
        }
    }
}

fn serve_connection(
    stream: TcpStream,
    state: &ServerState,
    conns: &Mutex<Vec<Weak<Connection>>>,
    workload: &WorkloadSpec,
) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = FrameReader::new(stream.try_clone()?);
    let client_id = match reader.read_frame() {
        Ok(Some(f)) if f.kind == FrameKind::ClientHello => f.client_id,
        Ok(Some(f)) => {
            warn!(
                "server {}: handshake expected CLIENT_HELLO, got {:?}; dropping",
                state.server_id(),
                f.kind
            );
            return Ok(());
        }
        // closed before completing the handshake
        Ok(None) => return Ok(()),
        Err(e) => return Err(e),
    };
    let conn = Arc::new(Connection {
        client_id,
        writer: Mutex::new(stream),
        open: AtomicBool::new(true),
    });
    if let Ok(mut v) = conns.lock() {
        v.retain(|w| w.strong_count() > 0);
        v.push(Arc::downgrade(&conn));
    }
    let _ = state.admission_tx.send(Admission::Joined(client_id));
    let mut sampler = ServiceSampler::new(workload, client_id)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;

    let result = loop {
        match reader.read_frame() {
            Ok(Some(frame)) => match frame.kind {
                FrameKind::Request => {
                    let enqueue_ns = now_ns();
                    let req = QueuedRequest {
                        frame,
                        enqueue_ns,
                        service_time: sampler.sample_service_time(),
                        conn: Arc::clone(&conn),
                    };
                    let _ = state.enqueue(req);
                }
                FrameKind::ClientBye => break Ok(()),
                other => {
                    warn!(
                        "server {}: unexpected {other:?} from client {client_id}",
                        state.server_id()
                    );
                }
            },
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        }
    };
    conn.close();
    let _ = state.admission_tx.send(Admission::Left(client_id));
    result
}
