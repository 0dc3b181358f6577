//! Anchors embedded in a system under test.
//!
//! When disabled every anchor returns at once and touches nothing. When
//! enabled each call sends one request to the player over its own pooled
//! connection and blocks until the player decides, so one node can have
//! several requests parked at the same time.

use std::collections::HashMap;
use std::io::BufReader;
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::model::{Action, ActionKind, MatchMode, NodeId, State};
use crate::value::CanonValue;
use crate::wire::{
    decode_frame, write_message, ActionRequest, ControlRequest, ControlResponse, FailReason, Phase, WireError,
    DEFAULT_PLAYER_ADDR, PROTO_VERSION,
};

pub const ENV_ENABLED: &str = "DETRACE_ENABLED";
pub const ENV_PLAYER_ADDR: &str = "DETRACE_PLAYER_ADDR";
pub const ENV_NODE_ID: &str = "DETRACE_NODE_ID";
pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_millis(5_000);

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("cannot reach player at {addr}: {source}")]
    Connect { addr: String, source: std::io::Error },
    #[error("handshake rejected: {0}")]
    Handshake(String),
    #[error("replay failed ({reason}): {detail}")]
    ReplayFail { reason: FailReason, detail: String, expected_action: Option<Action> },
    /// The trace has been fully replayed; no further steps will be granted.
    #[error("trace finished")]
    TraceDone,
    #[error("connection to player lost: {0}")]
    ConnectionLost(#[source] WireError),
    #[error("anchor misuse: {0}")]
    ProtocolMisuse(String),
    #[error("bad anchor configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorConfig {
    pub enabled: bool,
    pub player_addr: String,
    pub node: NodeId,
    pub connect_timeout: Duration,
}

impl AnchorConfig {
    pub fn disabled(node: NodeId) -> Self {
        AnchorConfig {
            enabled: false,
            player_addr: DEFAULT_PLAYER_ADDR.into(),
            node,
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
        }
    }

    pub fn enabled(player_addr: impl Into<String>, node: NodeId) -> Self {
        AnchorConfig { enabled: true, player_addr: player_addr.into(), ..Self::disabled(node) }
    }

    /// Reads `DETRACE_ENABLED`, `DETRACE_PLAYER_ADDR` and `DETRACE_NODE_ID`.
    pub fn from_env() -> Result<Self, AnchorError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, AnchorError> {
        let enabled = match get(ENV_ENABLED).as_deref().map(str::trim) {
            None | Some("" | "0" | "false") => false,
            Some("1" | "true") => true,
            Some(other) => return Err(AnchorError::Config(format!("{ENV_ENABLED}={other:?}, expected 0 or 1"))),
        };
        let node = match get(ENV_NODE_ID) {
            Some(v) => NodeId(
                v.trim().parse().map_err(|_| AnchorError::Config(format!("{ENV_NODE_ID}={v:?} is not a node id")))?,
            ),
            None if enabled => return Err(AnchorError::Config(format!("{ENV_NODE_ID} must be set when enabled"))),
            None => NodeId(0),
        };
        let player_addr = get(ENV_PLAYER_ADDR).unwrap_or_else(|| DEFAULT_PLAYER_ADDR.into());
        Ok(AnchorConfig { enabled, player_addr, node, connect_timeout: DEFAULT_CONNECT_TIMEOUT })
    }
}

/// What the player granted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grant {
    pub step_index: u64,
    /// The trace payload for drive-mode inputs, `Null` otherwise.
    pub payload: CanonValue,
    pub expected_state: Option<State>,
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

struct Pool {
    addr: SocketAddr,
    node: NodeId,
    connect_timeout: Duration,
    idle: Mutex<Vec<Conn>>,
    /// Payloads of begun internal actions, by name.
    open: Mutex<HashMap<String, CanonValue>>,
}

impl Pool {
    fn connect(&self) -> Result<Conn, AnchorError> {
        let stream = TcpStream::connect_timeout(&self.addr, self.connect_timeout)
            .map_err(|source| AnchorError::Connect { addr: self.addr.to_string(), source })?;
        let _ = stream.set_nodelay(true);
        let lost = |e: std::io::Error| AnchorError::ConnectionLost(e.into());
        let mut conn = Conn { writer: stream.try_clone().map_err(lost)?, reader: BufReader::new(stream) };
        conn.writer.set_read_timeout(Some(self.connect_timeout)).map_err(lost)?;
        let hello = ControlRequest::Hello { node: self.node, proto_version: PROTO_VERSION };
        write_message(&mut conn.writer, &hello).map_err(AnchorError::ConnectionLost)?;
        match decode_frame::<ControlResponse, _>(&mut conn.reader) {
            Ok(ControlResponse::Pass { .. }) => {}
            Ok(ControlResponse::Fail { detail, .. }) => return Err(AnchorError::Handshake(detail)),
            Ok(other) => return Err(AnchorError::Handshake(format!("unexpected hello reply {other:?}"))),
            Err(e) => return Err(AnchorError::Handshake(e.to_string())),
        }
        // requests may be parked indefinitely
        conn.writer.set_read_timeout(None).map_err(lost)?;
        Ok(conn)
    }

    fn call(&self, req: ActionRequest) -> Result<Grant, AnchorError> {
        let pooled = self.idle.lock().unwrap_or_else(|e| e.into_inner()).pop();
        let mut conn = match pooled {
            Some(c) => c,
            None => self.connect()?,
        };
        write_message(&mut conn.writer, &ControlRequest::Action(req)).map_err(AnchorError::ConnectionLost)?;
        match decode_frame::<ControlResponse, _>(&mut conn.reader).map_err(AnchorError::ConnectionLost)? {
            ControlResponse::Pass { step_index, payload, expected_state } => {
                self.idle.lock().unwrap_or_else(|e| e.into_inner()).push(conn);
                Ok(Grant { step_index, payload, expected_state })
            }
            ControlResponse::Fail { reason, detail, expected_action } => {
                Err(AnchorError::ReplayFail { reason, detail, expected_action })
            }
            ControlResponse::Done => Err(AnchorError::TraceDone),
        }
    }
}

/// A node's anchor handle; cheap to clone and safe to share across threads.
#[derive(Clone)]
pub struct AnchorHandle {
    config: AnchorConfig,
    pool: Option<Arc<Pool>>,
}

impl std::fmt::Debug for AnchorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnchorHandle").field("config", &self.config).finish_non_exhaustive()
    }
}

/// Creates a handle. Enabled handles connect and shake hands immediately.
pub fn anchor_init(config: AnchorConfig) -> Result<AnchorHandle, AnchorError> {
    if !config.enabled {
        return Ok(AnchorHandle { config, pool: None });
    }
    let addr = config
        .player_addr
        .to_socket_addrs()
        .map_err(|source| AnchorError::Connect { addr: config.player_addr.clone(), source })?
        .next()
        .ok_or_else(|| AnchorError::Config(format!("{} resolves to no address", config.player_addr)))?;
    let pool = Pool {
        addr,
        node: config.node,
        connect_timeout: config.connect_timeout,
        idle: Mutex::new(Vec::new()),
        open: Mutex::new(HashMap::new()),
    };
    let first = pool.connect()?;
    pool.idle.lock().unwrap_or_else(|e| e.into_inner()).push(first);
    Ok(AnchorHandle { config, pool: Some(Arc::new(pool)) })
}

impl AnchorHandle {
    pub fn is_enabled(&self) -> bool {
        self.pool.is_some()
    }

    pub fn node(&self) -> NodeId {
        self.config.node
    }

    pub fn config(&self) -> &AnchorConfig {
        &self.config
    }

    fn action(&self, kind: ActionKind, name: &str, payload: CanonValue) -> Result<Action, AnchorError> {
        Action::new(kind, name, self.config.node, payload).map_err(|e| AnchorError::ProtocolMisuse(e.to_string()))
    }

    /// Input anchor. With a payload the player verifies it; without one the
    /// player supplies the trace payload, which is returned.
    pub fn input(
        &self,
        name: &str,
        payload: Option<CanonValue>,
        observed_state: Option<State>,
    ) -> Result<CanonValue, AnchorError> {
        let verify = payload.clone();
        match self.input_granted(name, payload, observed_state)? {
            None => Ok(verify.unwrap_or_default()),
            Some(grant) => Ok(verify.unwrap_or(grant.payload)),
        }
    }

    /// Like [`input`](Self::input) but returns the whole grant; `None` when disabled.
    pub fn input_granted(
        &self,
        name: &str,
        payload: Option<CanonValue>,
        observed_state: Option<State>,
    ) -> Result<Option<Grant>, AnchorError> {
        let Some(pool) = &self.pool else { return Ok(None) };
        let mode = if payload.is_some() { MatchMode::Verify } else { MatchMode::Drive };
        let action = self.action(ActionKind::Input, name, payload.unwrap_or_default())?;
        pool.call(ActionRequest { phase: Phase::Atomic, action, mode, observed_state }).map(Some)
    }

    pub fn output(&self, name: &str, payload: CanonValue, observed_state: Option<State>) -> Result<(), AnchorError> {
        self.output_granted(name, payload, observed_state).map(drop)
    }

    pub fn output_granted(
        &self,
        name: &str,
        payload: CanonValue,
        observed_state: Option<State>,
    ) -> Result<Option<Grant>, AnchorError> {
        let Some(pool) = &self.pool else { return Ok(None) };
        let action = self.action(ActionKind::Output, name, payload)?;
        pool.call(ActionRequest { phase: Phase::Atomic, action, mode: MatchMode::Verify, observed_state }).map(Some)
    }

    /// Blocks until the internal action `name` is the current step.
    pub fn begin_internal(&self, name: &str, payload: CanonValue) -> Result<(), AnchorError> {
        self.begin_internal_granted(name, payload).map(drop)
    }

    pub fn begin_internal_granted(&self, name: &str, payload: CanonValue) -> Result<Option<Grant>, AnchorError> {
        let Some(pool) = &self.pool else { return Ok(None) };
        let action = self.action(ActionKind::Internal, name, payload.clone())?;
        {
            let mut open = pool.open.lock().unwrap_or_else(|e| e.into_inner());
            if open.contains_key(name) {
                return Err(AnchorError::ProtocolMisuse(format!("{name} already begun on node {}", self.config.node)));
            }
            open.insert(name.to_owned(), payload);
        }
        let req = ActionRequest { phase: Phase::Begin, action, mode: MatchMode::Verify, observed_state: None };
        let result = pool.call(req);
        if result.is_err() {
            pool.open.lock().unwrap_or_else(|e| e.into_inner()).remove(name);
        }
        result.map(Some)
    }

    /// Submits the state check for a begun internal action and advances the trace.
    pub fn end_internal(&self, name: &str, observed_state: Option<State>) -> Result<(), AnchorError> {
        self.end_internal_granted(name, observed_state).map(drop)
    }

    pub fn end_internal_granted(&self, name: &str, observed_state: Option<State>) -> Result<Option<Grant>, AnchorError> {
        let Some(pool) = &self.pool else { return Ok(None) };
        let payload = pool
            .open
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .remove(name)
            .ok_or_else(|| AnchorError::ProtocolMisuse(format!("end of {name} without begin")))?;
        let action = self.action(ActionKind::Internal, name, payload)?;
        pool.call(ActionRequest { phase: Phase::End, action, mode: MatchMode::Verify, observed_state }).map(Some)
    }
}
