use std::collections::HashMap;
use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::model::{Action, NodeId, Trace};
use crate::wire::{decode_frame, write_message, ControlRequest, ControlResponse, FailReason, WireError, PROTO_VERSION};

use super::cursor::{Cursor, Ticket, Verdict};
use super::{PlayerError, RunReport, RunStatus};

struct Shared {
    cursor: Mutex<Cursor>,
    changed: Condvar,
    writers: Mutex<HashMap<Ticket, TcpStream>>,
    shutdown: AtomicBool,
    next_ticket: AtomicU64,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Cursor> {
        self.cursor.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Sends responses while the cursor is still locked, so each connection
    /// sees them in decision order.
    fn deliver(&self, responses: Vec<(Ticket, ControlResponse)>) {
        if responses.is_empty() {
            return;
        }
        let mut writers = self.writers.lock().unwrap_or_else(|e| e.into_inner());
        for (ticket, resp) in responses {
            if let Some(w) = writers.get_mut(&ticket) {
                if let Err(e) = write_message(w, &resp) {
                    tracing::debug!(ticket, error = %e, "dropping response to closed connection");
                }
            }
        }
        self.changed.notify_all();
    }
}

/// Cloneable access to a running player from other threads.
#[derive(Clone)]
pub struct PlayerHandle {
    shared: Arc<Shared>,
}

impl PlayerHandle {
    /// Fails the run unless it already has a verdict.
    pub fn abort(&self, reason: FailReason, detail: impl Into<String>) {
        self.abort_at(None, reason, detail)
    }

    /// Like [`abort`](Self::abort), blaming the already granted `step`.
    pub fn abort_at(&self, step: Option<usize>, reason: FailReason, detail: impl Into<String>) {
        let mut cursor = self.shared.lock();
        let out = cursor.abort(reason, detail.into(), step);
        self.shared.deliver(out);
        self.shared.changed.notify_all();
    }

    pub fn grant_log(&self) -> Vec<Action> {
        self.shared.lock().grant_log().to_vec()
    }

    pub fn received_actions(&self) -> Vec<Action> {
        self.shared.lock().received_actions().to_vec()
    }

    pub fn is_finished(&self) -> bool {
        self.shared.lock().is_finished()
    }
}

/// A player bound to a socket and serving one trace.
///
/// Dropping it closes the listener and every connection.
pub struct Player {
    shared: Arc<Shared>,
    addr: SocketAddr,
    trace_index: usize,
    started: Instant,
    acceptor: Option<JoinHandle<()>>,
}

impl Player {
    pub fn bind(
        addr: impl ToSocketAddrs,
        trace: Trace,
        trace_index: usize,
        step_timeout: Duration,
    ) -> Result<Player, PlayerError> {
        if step_timeout.is_zero() {
            return Err(PlayerError::Config("step timeout must be positive".into()));
        }
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let started = Instant::now();
        let shared = Arc::new(Shared {
            cursor: Mutex::new(Cursor::new(trace, step_timeout, started)),
            changed: Condvar::new(),
            writers: Mutex::new(HashMap::new()),
            shutdown: AtomicBool::new(false),
            next_ticket: AtomicU64::new(1),
        });
        let acceptor = {
            let shared = shared.clone();
            thread::Builder::new().name("player-accept".into()).spawn(move || accept_loop(listener, shared))?
        };
        tracing::debug!(%addr, trace_index, "player listening");
        Ok(Player { shared, addr, trace_index, started, acceptor: Some(acceptor) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn handle(&self) -> PlayerHandle {
        PlayerHandle { shared: self.shared.clone() }
    }

    pub fn grant_log(&self) -> Vec<Action> {
        self.handle().grant_log()
    }

    /// Blocks until the run has a verdict and returns its report.
    ///
    /// The player keeps answering late requests from the verdict until dropped.
    pub fn run(&self) -> RunReport {
        let mut cursor = self.shared.lock();
        while let Some(deadline) = cursor.deadline() {
            let now = Instant::now();
            if now >= deadline {
                let out = cursor.check_timeout(now);
                self.shared.deliver(out);
                continue;
            }
            cursor = self.shared.changed.wait_timeout(cursor, deadline - now).unwrap_or_else(|e| e.into_inner()).0;
        }
        let (status, failed_step, reason, detail, expected_action) = match cursor.verdict().expect("loop ends on verdict") {
            Verdict::Pass => (RunStatus::Pass, None, None, None, None),
            Verdict::Fail { step, reason, detail, expected_action } => {
                (RunStatus::Fail, Some(*step as u64), Some(*reason), Some(detail.clone()), expected_action.clone())
            }
        };
        RunReport {
            trace_index: self.trace_index as u64,
            status,
            failed_step,
            reason,
            detail,
            expected_action,
            received_actions: cursor.received_actions().to_vec(),
            elapsed_ms: self.started.elapsed().as_millis() as u64,
        }
    }
}

impl Drop for Player {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        let writers = self.shared.writers.lock().unwrap_or_else(|e| e.into_inner());
        for w in writers.values() {
            let _ = w.shutdown(Shutdown::Both);
        }
        drop(writers);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                continue;
            }
        };
        let ticket = shared.next_ticket.fetch_add(1, Ordering::Relaxed);
        let writer = match stream.try_clone() {
            Ok(w) => w,
            Err(e) => {
                tracing::warn!(error = %e, "cannot clone connection");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        shared.writers.lock().unwrap_or_else(|e| e.into_inner()).insert(ticket, writer);
        let shared = shared.clone();
        let spawned = thread::Builder::new().name(format!("player-conn-{ticket}")).spawn(move || {
            if let Err(e) = serve_connection(stream, ticket, &shared) {
                tracing::debug!(ticket, error = %e, "connection ended");
            }
            shared.lock().withdraw(ticket);
            shared.writers.lock().unwrap_or_else(|e| e.into_inner()).remove(&ticket);
        });
        if let Err(e) = spawned {
            tracing::warn!(error = %e, "cannot spawn connection handler");
        }
    }
}

fn reject(shared: &Shared, ticket: Ticket, detail: String) -> Result<(), WireError> {
    let resp = ControlResponse::Fail { reason: FailReason::ProtocolError, detail, expected_action: None };
    let _cursor = shared.lock();
    shared.deliver(vec![(ticket, resp)]);
    Ok(())
}

/// Reads requests from one connection. Connection-level errors (bad
/// framing, missing or mismatched Hello) close only that connection.
fn serve_connection(stream: TcpStream, ticket: Ticket, shared: &Shared) -> Result<(), WireError> {
    let mut reader = BufReader::new(stream);
    let mut node: Option<NodeId> = None;
    loop {
        let req = match decode_frame::<ControlRequest, _>(&mut reader) {
            Ok(r) => r,
            Err(WireError::Closed) => return Ok(()),
            Err(WireError::Io(e)) if e.kind() == io::ErrorKind::ConnectionReset => return Ok(()),
            Err(e @ (WireError::Schema(_) | WireError::Frame(_))) => return reject(shared, ticket, e.to_string()),
            Err(e) => return Err(e),
        };
        match req {
            ControlRequest::Hello { node: n, proto_version } => {
                if proto_version != PROTO_VERSION {
                    let detail = format!("protocol version {proto_version} unsupported, expected {PROTO_VERSION}");
                    return reject(shared, ticket, detail);
                }
                if node.is_some() {
                    return reject(shared, ticket, "second hello on one connection".into());
                }
                node = Some(n);
                let cursor = shared.lock();
                let resp = ControlResponse::Pass {
                    step_index: cursor.step_index() as u64,
                    payload: Default::default(),
                    expected_state: None,
                };
                shared.deliver(vec![(ticket, resp)]);
            }
            ControlRequest::Action(req) => {
                match node {
                    None => return reject(shared, ticket, "action before hello".into()),
                    Some(n) if n != req.action.node => {
                        return reject(shared, ticket, format!("action for node {} on connection of node {n}", req.action.node));
                    }
                    Some(_) => {}
                }
                let mut cursor = shared.lock();
                let out = cursor.submit(ticket, req, Instant::now());
                shared.deliver(out);
            }
            ControlRequest::Bye { .. } => return Ok(()),
        }
    }
}
