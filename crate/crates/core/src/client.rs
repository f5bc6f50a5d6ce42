//! Open-loop load generator with a client-owned request budget.
//!
//! A client connects, greets the target with CLIENT_HELLO and a zero-length
//! ping REQUEST (request id 0) so connection set-up is never measured. At its
//! start instant it issues requests `1..=total_requests` at pre-planned
//! instants drawn from its QPS schedule, regardless of when responses come
//! back. When the last response arrives it sends CLIENT_BYE and closes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::{debug, warn};
use thiserror::Error;

use crate::clock::{now_ns, secs_to_ns, sleep_until};
use crate::proto::{write_frame, Frame, FrameKind, FrameReader, ResponsePayload};
use crate::schedule::{plan_send_offsets, ArrivalProcess, QpsSchedule};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("client {client_id}: cannot connect to {addr}: {source}")]
    Connect {
        client_id: u64,
        addr: String,
        source: io::Error,
    },
    #[error("client {client_id}: transport error: {source}")]
    Transport { client_id: u64, source: io::Error },
    #[error("client {client_id}: response for unknown request {request_id}")]
    UnknownRequest { client_id: u64, request_id: u64 },
    #[error("client {client_id}: unexpected {kind:?} frame")]
    UnexpectedFrame { client_id: u64, kind: FrameKind },
    #[error("client {client_id}: bad response payload: {source}")]
    BadPayload {
        client_id: u64,
        source: crate::proto::ProtoError,
    },
    #[error("client log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSpec {
    pub client_id: u64,
    /// `host:port` of a server or the balancer.
    pub target_address: String,
    pub start_delay_s: f64,
    pub total_requests: u64,
    pub schedule: QpsSchedule,
    pub sender_threads: usize,
    pub seed: u64,
    pub arrival: ArrivalProcess,
}

impl ClientSpec {
    pub fn new(
        client_id: u64,
        target: impl Into<String>,
        total_requests: u64,
        schedule: QpsSchedule,
    ) -> Self {
        ClientSpec {
            client_id,
            target_address: target.into(),
            start_delay_s: 0.0,
            total_requests,
            schedule,
            sender_threads: 1,
            seed: client_id,
            arrival: ArrivalProcess::default(),
        }
    }

    /// Planned send offsets in seconds from the client's start, indexed by
    /// `request_id - 1`.
    pub fn planned_offsets(&self) -> Vec<f64> {
        plan_send_offsets(
            &self.schedule,
            self.total_requests as usize,
            self.seed,
            self.arrival,
        )
    }
}

/// One completed request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogEntry {
    pub request_id: u64,
    /// Planned send instant; kept in memory only, not written to CSV.
    pub planned_ns: u64,
    pub send_ns: u64,
    pub recv_ns: u64,
    pub timings: ResponsePayload,
}

impl LogEntry {
    pub fn sojourn_ns(&self) -> u64 {
        self.recv_ns.saturating_sub(self.send_ns)
    }
}

pub const CLIENT_LOG_HEADER: &str =
    "request_id,send_ns,recv_ns,sojourn_ns,server_id,server_recv_ns,service_start_ns,service_end_ns";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientLog {
    pub client_id: u64,
    /// Scheduled start instant of the run (clock::now_ns domain).
    pub start_ns: u64,
    /// Receive time of the last response (or abort time).
    pub end_ns: u64,
    pub entries: Vec<LogEntry>,
    pub protocol_errors: u64,
    pub aborted: Option<String>,
}

impl ClientLog {
    pub fn lifetime_s(&self) -> f64 {
        self.end_ns.saturating_sub(self.start_ns) as f64 / 1e9
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CLIENT_LOG_HEADER}")?;
        for e in &self.entries {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                e.request_id,
                e.send_ns,
                e.recv_ns,
                e.sojourn_ns(),
                e.timings.server_id,
                e.timings.server_recv_ns,
                e.timings.service_start_ns,
                e.timings.service_end_ns
            )?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        self.write_csv(BufWriter::new(File::create(path)?))
    }

    /// Read the entries of a client CSV log. Planned instants are not stored
    /// on disk; they are set equal to the send time.
    pub fn read_csv<R: BufRead>(client_id: u64, r: R) -> Result<ClientLog, ClientError> {
        let mut entries = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| ClientError::Log(e.to_string()))?;
            if n == 0 {
                if line.trim() != CLIENT_LOG_HEADER {
                    return Err(ClientError::Log(format!("unexpected header `{line}`")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<u64> = line
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<Result<_, _>>()
                .map_err(|e| ClientError::Log(format!("line {}: {e}", n + 1)))?;
            if f.len() != 8 {
                return Err(ClientError::Log(format!(
                    "line {}: expected 8 fields, got {}",
                    n + 1,
                    f.len()
                )));
            }
            entries.push(LogEntry {
                request_id: f[0],
                planned_ns: f[1],
                send_ns: f[1],
                recv_ns: f[2],
                timings: ResponsePayload {
                    server_id: f[4] as u32,
                    server_recv_ns: f[5],
                    service_start_ns: f[6],
                    service_end_ns: f[7],
                },
            });
        }
        let start_ns = entries.iter().map(|e| e.send_ns).min().unwrap_or(0);
        let end_ns = entries.iter().map(|e| e.recv_ns).max().unwrap_or(0);
        Ok(ClientLog {
            client_id,
            start_ns,
            end_ns,
            entries,
            protocol_errors: 0,
            aborted: None,
        })
    }

    pub fn load(client_id: u64, path: &Path) -> Result<ClientLog, ClientError> {
        let f =
            File::open(path).map_err(|e| ClientError::Log(format!("{}: {e}", path.display())))?;
        Self::read_csv(client_id, BufReader::new(f))
    }
}

/// Outcome of folding one response into the tracker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Pending,
    /// The budget is exhausted: every request has its log entry.
    Done,
}

/// Outstanding-request table and log, shared by sender and receiver threads.
#[derive(Debug)]
pub struct Tracker {
    client_id: u64,
    total: u64,
    outstanding: Mutex<HashMap<u64, (u64, u64)>>,
    entries: Mutex<Vec<LogEntry>>,
    completed: AtomicU64,
    protocol_errors: AtomicU64,
}

impl Tracker {
    pub fn new(client_id: u64, total: u64) -> Self {
        Tracker {
            client_id,
            total,
            outstanding: Mutex::new(HashMap::new()),
            entries: Mutex::new(Vec::with_capacity(total.min(1 << 24) as usize)),
            completed: AtomicU64::new(0),
            protocol_errors: AtomicU64::new(0),
        }
    }

    /// Register a request about to be written.
    pub fn record_send(&self, request_id: u64, planned_ns: u64, send_ns: u64) {
        self.outstanding
            .lock()
            .unwrap()
            .insert(request_id, (planned_ns, send_ns));
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.lock().unwrap().len()
    }

    pub fn completed(&self) -> u64 {
        self.completed.load(Ordering::Acquire)
    }

    pub fn protocol_errors(&self) -> u64 {
        self.protocol_errors.load(Ordering::Relaxed)
    }

    /// Match a RESPONSE to its request and append a log entry.
    pub fn fini_req(&self, response: &Frame, recv_ns: u64) -> Result<Completion, ClientError> {
        if response.kind != FrameKind::Response {
            self.protocol_errors.fetch_add(1, Ordering::Relaxed);
            return Err(ClientError::UnexpectedFrame {
                client_id: self.client_id,
                kind: response.kind,
            });
        }
        let timings = match ResponsePayload::decode(&response.payload) {
            Ok(t) => t,
            Err(source) => {
                self.protocol_errors.fetch_add(1, Ordering::Relaxed);
                return Err(ClientError::BadPayload {
                    client_id: self.client_id,
                    source,
                });
            }
        };
        let Some((planned_ns, send_ns)) = self
            .outstanding
            .lock()
            .unwrap()
            .remove(&response.request_id)
        else {
            self.protocol_errors.fetch_add(1, Ordering::Relaxed);
            return Err(ClientError::UnknownRequest {
                client_id: self.client_id,
                request_id: response.request_id,
            });
        };
        self.entries.lock().unwrap().push(LogEntry {
            request_id: response.request_id,
            planned_ns,
            send_ns,
            recv_ns: recv_ns.max(send_ns + 1),
            timings,
        });
        let done = self.completed.fetch_add(1, Ordering::AcqRel) + 1;
        Ok(if done >= self.total {
            Completion::Done
        } else {
            Completion::Pending
        })
    }

    pub fn take_entries(&self) -> Vec<LogEntry> {
        let mut v = std::mem::take(&mut *self.entries.lock().unwrap());
        v.sort_by_key(|e| e.request_id);
        v
    }
}

/// A client that has completed its handshake and is ready to run.
#[derive(Debug)]
pub struct ConnectedClient {
    spec: ClientSpec,
    stream: TcpStream,
}

/// How long a client waits in silence for responses before giving up.
pub const RESPONSE_TIMEOUT: Duration = Duration::from_secs(60);

/// Connect, send CLIENT_HELLO and a ping, and wait for the ping's response.
pub fn connect(spec: &ClientSpec) -> Result<ConnectedClient, ClientError> {
    let client_id = spec.client_id;
    let connect_err = |source| ClientError::Connect {
        client_id,
        addr: spec.target_address.clone(),
        source,
    };
    let addr = spec
        .target_address
        .to_socket_addrs()
        .map_err(connect_err)?
        .next()
        .ok_or_else(|| {
            connect_err(io::Error::new(
                io::ErrorKind::AddrNotAvailable,
                "address resolved to nothing",
            ))
        })?;
    let mut stream =
        TcpStream::connect_timeout(&addr, Duration::from_secs(10)).map_err(connect_err)?;
    let transport = |source| ClientError::Transport { client_id, source };
    stream.set_nodelay(true).map_err(transport)?;
    write_frame(&mut stream, &Frame::hello(client_id)).map_err(transport)?;
    write_frame(&mut stream, &Frame::request(client_id, 0)).map_err(transport)?;
    stream
        .set_read_timeout(Some(Duration::from_secs(30)))
        .map_err(transport)?;
    let mut reader = FrameReader::new(stream.try_clone().map_err(transport)?);
    match reader.read_frame() {
        Ok(Some(f)) if f.kind == FrameKind::Response && f.request_id == 0 => {}
        Ok(Some(f)) => {
            return Err(ClientError::UnexpectedFrame {
                client_id,
                kind: f.kind,
            })
        }
        Ok(None) => {
            return Err(transport(io::Error::new(
                io::ErrorKind::ConnectionAborted,
                "closed during handshake",
            )))
        }
        Err(e) => return Err(transport(e)),
    }
    Ok(ConnectedClient {
        spec: spec.clone(),
        stream,
    })
}

struct SendSide {
    client_id: u64,
    start_ns: u64,
    planned: Vec<u64>,
    writer: Mutex<TcpStream>,
    tracker: Arc<Tracker>,
    abort: AtomicBool,
    error: Mutex<Option<String>>,
}

impl SendSide {
    /// Issue request `index + 1` at its planned instant. Late sends go out
    /// immediately; the plan itself never shifts.
    fn start_req(&self, index: usize) -> io::Result<()> {
        let planned_ns = self.start_ns + self.planned[index];
        sleep_until(planned_ns);
        let request_id = index as u64 + 1;
        let frame = Frame::request(self.client_id, request_id);
        let mut w = self.writer.lock().unwrap();
        let send_ns = now_ns();
        self.tracker.record_send(request_id, planned_ns, send_ns);
        write_frame(&mut *w, &frame)
    }

    fn fail(&self, msg: String) {
        self.abort.store(true, Ordering::Release);
        let mut e = self.error.lock().unwrap();
        if e.is_none() {
            *e = Some(msg);
        }
    }
}

impl ConnectedClient {
    pub fn spec(&self) -> &ClientSpec {
        &self.spec
    }

    /// Run the whole budget, starting the schedule at `start_ns`. Blocks
    /// until every response arrived or the client aborted.
    pub fn run(self, start_ns: u64) -> ClientLog {
        let spec = self.spec;
        let client_id = spec.client_id;
        let planned: Vec<u64> = spec.planned_offsets().into_iter().map(secs_to_ns).collect();
        let tracker = Arc::new(Tracker::new(client_id, spec.total_requests));
        let writer = match self.stream.try_clone() {
            Ok(w) => w,
            Err(e) => return aborted_log(client_id, start_ns, e.to_string()),
        };
        let side = Arc::new(SendSide {
            client_id,
            start_ns,
            planned,
            writer: Mutex::new(writer),
            tracker: Arc::clone(&tracker),
            abort: AtomicBool::new(false),
            error: Mutex::new(None),
        });
        let threads = spec.sender_threads.max(1);
        let senders_done = Arc::new(AtomicU64::new(0));
        let mut handles = Vec::with_capacity(threads);
        for t in 0..threads {
            let thread_side = Arc::clone(&side);
            let senders_done = Arc::clone(&senders_done);
            let spawned = std::thread::Builder::new()
                .name(format!("client{client_id}-send{t}"))
                .spawn(move || {
                    let side = thread_side;
                    for i in (t..side.planned.len()).step_by(threads) {
                        if side.abort.load(Ordering::Acquire) {
                            break;
                        }
                        if let Err(e) = side.start_req(i) {
                            side.fail(format!("send failed: {e}"));
                            break;
                        }
                    }
                    senders_done.fetch_add(1, Ordering::AcqRel);
                });
            match spawned {
                Ok(h) => handles.push(h),
                Err(e) => side.fail(format!("cannot spawn sender: {e}")),
            }
        }

        let mut reader = FrameReader::new(self.stream);
        let _ = reader
            .get_ref()
            .set_read_timeout(Some(Duration::from_millis(500)));
        let mut silent_since = now_ns();
        let mut done = spec.total_requests == 0;
        while !done && !side.abort.load(Ordering::Acquire) {
            match reader.read_frame() {
                Ok(Some(frame)) => {
                    silent_since = now_ns();
                    match tracker.fini_req(&frame, silent_since) {
                        Ok(Completion::Done) => done = true,
                        Ok(Completion::Pending) => {}
                        Err(e) => warn!("{e}"),
                    }
                }
                Ok(None) => side.fail("connection closed by peer".into()),
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) =>
                {
                    let senders_running = senders_done.load(Ordering::Acquire) < threads as u64;
                    let idle = tracker.outstanding() == 0 && senders_running;
                    if !idle && now_ns() - silent_since > RESPONSE_TIMEOUT.as_nanos() as u64 {
                        side.fail("timed out waiting for responses".into());
                    } else if idle {
                        silent_since = now_ns();
                    }
                }
                Err(e) => side.fail(format!("receive failed: {e}")),
            }
        }
        let end_ns = now_ns();
        if done {
            if let Ok(mut w) = side.writer.lock() {
                let _ = write_frame(&mut *w, &Frame::bye(client_id));
                let _ = w.flush();
                let _ = w.shutdown(Shutdown::Both);
            }
        } else {
            side.abort.store(true, Ordering::Release);
            let _ = reader.get_ref().shutdown(Shutdown::Both);
        }
        for h in handles {
            let _ = h.join();
        }
        let aborted = side.error.lock().unwrap().take().filter(|_| !done);
        if let Some(msg) = &aborted {
            warn!("client {client_id} aborted: {msg}");
        }
        let log = ClientLog {
            client_id,
            start_ns,
            end_ns,
            entries: tracker.take_entries(),
            protocol_errors: tracker.protocol_errors(),
            aborted,
        };
        debug!(
            "client {client_id}: {} entries in {:.2}s",
            log.entries.len(),
            log.lifetime_s()
        );
        log
    }
}

fn aborted_log(client_id: u64, start_ns: u64, msg: String) -> ClientLog {
    ClientLog {
        client_id,
        start_ns,
        end_ns: now_ns(),
        aborted: Some(msg),
        ..ClientLog::default()
    }
}

/// Connect and run immediately.
pub fn run_client(spec: &ClientSpec) -> Result<ClientLog, ClientError> {
    let c = connect(spec)?;
    Ok(c.run(now_ns()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn response(id: u64) -> Frame {
        let t = ResponsePayload {
            server_recv_ns: 1,
            service_start_ns: 2,
            service_end_ns: 3,
            server_id: 0,
        };
        Frame::response(&Frame::request(1, id), &t)
    }

    #[test]
    fn single_request_budget_completes() {
        let t = Tracker::new(1, 1);
        t.record_send(1, 10, 10);
        assert_eq!(t.fini_req(&response(1), 50).unwrap(), Completion::Done);
        let e = t.take_entries();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].sojourn_ns(), 40);
    }

    #[test]
    fn duplicate_response_counts_one_error() {
        let t = Tracker::new(1, 3);
        t.record_send(1, 0, 0);
        t.record_send(2, 0, 0);
        assert_eq!(t.fini_req(&response(1), 5).unwrap(), Completion::Pending);
        assert!(matches!(
            t.fini_req(&response(1), 6),
            Err(ClientError::UnknownRequest { request_id: 1, .. })
        ));
        assert_eq!(t.take_entries().len(), 1);
        assert_eq!(t.protocol_errors(), 1);
    }

    #[test]
    fn sojourn_is_positive() {
        let t = Tracker::new(1, 1);
        t.record_send(1, 100, 100);
        t.fini_req(&response(1), 100).unwrap();
        assert!(t.take_entries()[0].sojourn_ns() > 0);
    }

    #[test]
    fn csv_round_trip() {
        let log = ClientLog {
            client_id: 4,
            start_ns: 0,
            end_ns: 100,
            entries: vec![LogEntry {
                request_id: 1,
                planned_ns: 5,
                send_ns: 5,
                recv_ns: 90,
                timings: ResponsePayload {
                    server_recv_ns: 10,
                    service_start_ns: 20,
                    service_end_ns: 80,
                    server_id: 2,
                },
            }],
            protocol_errors: 0,
            aborted: None,
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(CLIENT_LOG_HEADER));
        assert!(text.contains("1,5,90,85,2,10,20,80"));
        let back = ClientLog::read_csv(4, &buf[..]).unwrap();
        assert_eq!(back.entries, log.entries);
    }

    #[test]
    fn refused_connection_is_reported() {
        // bind then drop to get a port nobody listens on
        let port = std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let spec = ClientSpec::new(
            1,
            format!("127.0.0.1:{port}"),
            1,
            QpsSchedule::constant(10.0).unwrap(),
        );
        assert!(matches!(connect(&spec), Err(ClientError::Connect { .. })));
    }
}
