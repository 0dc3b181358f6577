//! Control messages between anchor clients and the player.
//!
//! Each message travels as a frame: a 4-byte big-endian body length
//! followed by the canonical encoding of the message.

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::model::{node_from_value, Action, ActionKind, MatchMode, NodeId, State};
use crate::value::{canon_decode, CanonValue};

pub const PROTO_VERSION: i64 = 1;
/// Largest accepted frame body, 16 MiB.
pub const MAX_FRAME_LEN: usize = 1 << 24;
pub const DEFAULT_PLAYER_ADDR: &str = "127.0.0.1:9000";

#[derive(Debug, Error)]
pub enum WireError {
    #[error("message body of {0} bytes exceeds the frame limit")]
    MessageTooLarge(usize),
    #[error("frame error: {0}")]
    Frame(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn schema(msg: impl Into<String>) -> WireError {
    WireError::Schema(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Atomic,
    Begin,
    End,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Atomic => "atomic",
            Phase::Begin => "begin",
            Phase::End => "end",
        }
    }
}

/// An anchor asking to perform (or finish) an action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionRequest {
    pub phase: Phase,
    pub action: Action,
    pub mode: MatchMode,
    pub observed_state: Option<State>,
}

impl ActionRequest {
    pub fn validate(&self) -> Result<(), WireError> {
        let kind = self.action.kind;
        match (self.phase, kind) {
            (Phase::Atomic, ActionKind::Input | ActionKind::Output) => {}
            (Phase::Begin | Phase::End, ActionKind::Internal) => {}
            (phase, kind) => return Err(schema(format!("phase {} not allowed for {kind} actions", phase.as_str()))),
        }
        if self.mode == MatchMode::Drive && kind != ActionKind::Input {
            return Err(schema(format!("drive mode not allowed for {kind} actions")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlRequest {
    Hello { node: NodeId, proto_version: i64 },
    Action(ActionRequest),
    Bye { node: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailReason {
    UnexpectedAction,
    StateMismatch,
    Timeout,
    TraceExhausted,
    ProtocolError,
}

impl FailReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailReason::UnexpectedAction => "unexpected_action",
            FailReason::StateMismatch => "state_mismatch",
            FailReason::Timeout => "timeout",
            FailReason::TraceExhausted => "trace_exhausted",
            FailReason::ProtocolError => "protocol_error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "unexpected_action" => FailReason::UnexpectedAction,
            "state_mismatch" => FailReason::StateMismatch,
            "timeout" => FailReason::Timeout,
            "trace_exhausted" => FailReason::TraceExhausted,
            "protocol_error" => FailReason::ProtocolError,
            _ => return None,
        })
    }
}

impl fmt::Display for FailReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlResponse {
    /// `payload` is `Null` unless the request was a drive-mode input.
    Pass { step_index: u64, payload: CanonValue, expected_state: Option<State> },
    Fail { reason: FailReason, detail: String, expected_action: Option<Action> },
    Done,
}

/// Conversion between a message and its canonical value form.
pub trait Message: Sized {
    fn to_value(&self) -> CanonValue;
    fn from_value(v: &CanonValue) -> Result<Self, WireError>;
}

fn opt_state(v: &Option<State>) -> CanonValue {
    v.as_ref().map_or(CanonValue::Null, State::to_value)
}

fn read_opt_state(v: Option<&CanonValue>) -> Result<Option<State>, WireError> {
    match v {
        None | Some(CanonValue::Null) => Ok(None),
        Some(v) => State::from_value(v).map(Some).map_err(|e| schema(e.to_string())),
    }
}

fn field<'a>(v: &'a CanonValue, key: &str) -> Result<&'a CanonValue, WireError> {
    v.get(key).ok_or_else(|| schema(format!("missing field {key:?}")))
}

fn str_field<'a>(v: &'a CanonValue, key: &str) -> Result<&'a str, WireError> {
    field(v, key)?.as_str().ok_or_else(|| schema(format!("field {key:?} must be a string")))
}

fn node_field(v: &CanonValue) -> Result<NodeId, WireError> {
    node_from_value(field(v, "node")?).map_err(|e| schema(e.to_string()))
}

fn msg_type(v: &CanonValue) -> Result<&str, WireError> {
    if v.as_map().is_none() {
        return Err(schema("message must be a map"));
    }
    str_field(v, "type")
}

impl Message for ControlRequest {
    fn to_value(&self) -> CanonValue {
        match self {
            ControlRequest::Hello { node, proto_version } => CanonValue::map([
                ("type", "hello".into()),
                ("node", (*node).into()),
                ("proto_version", (*proto_version).into()),
            ]),
            ControlRequest::Action(req) => CanonValue::map([
                ("type", "action".into()),
                ("phase", req.phase.as_str().into()),
                ("kind", req.action.kind.as_str().into()),
                ("name", req.action.name.clone().into()),
                ("node", req.action.node.into()),
                ("payload", req.action.payload.clone()),
                ("mode", req.mode.as_str().into()),
                ("observed_state", opt_state(&req.observed_state)),
            ]),
            ControlRequest::Bye { node } => CanonValue::map([("type", "bye".into()), ("node", (*node).into())]),
        }
    }

    fn from_value(v: &CanonValue) -> Result<Self, WireError> {
        match msg_type(v)? {
            "hello" => Ok(ControlRequest::Hello {
                node: node_field(v)?,
                proto_version: field(v, "proto_version")?
                    .as_i64()
                    .ok_or_else(|| schema("proto_version must be an integer"))?,
            }),
            "action" => {
                let phase = match str_field(v, "phase")? {
                    "atomic" => Phase::Atomic,
                    "begin" => Phase::Begin,
                    "end" => Phase::End,
                    other => return Err(schema(format!("unknown phase {other:?}"))),
                };
                let mode = match str_field(v, "mode")? {
                    "verify" => MatchMode::Verify,
                    "drive" => MatchMode::Drive,
                    other => return Err(schema(format!("unknown mode {other:?}"))),
                };
                let kind = str_field(v, "kind")?.parse().map_err(|e: crate::model::ModelError| schema(e.to_string()))?;
                let action = Action::new(
                    kind,
                    str_field(v, "name")?,
                    node_field(v)?,
                    v.get("payload").cloned().unwrap_or_default(),
                )
                .map_err(|e| schema(e.to_string()))?;
                let req = ActionRequest { phase, action, mode, observed_state: read_opt_state(v.get("observed_state"))? };
                req.validate()?;
                Ok(ControlRequest::Action(req))
            }
            "bye" => Ok(ControlRequest::Bye { node: node_field(v)? }),
            other => Err(schema(format!("unknown request type {other:?}"))),
        }
    }
}

impl Message for ControlResponse {
    fn to_value(&self) -> CanonValue {
        match self {
            ControlResponse::Pass { step_index, payload, expected_state } => CanonValue::map([
                ("type", "pass".into()),
                ("step_index", CanonValue::Int(*step_index as i64)),
                ("payload", payload.clone()),
                ("expected_state", opt_state(expected_state)),
            ]),
            ControlResponse::Fail { reason, detail, expected_action } => CanonValue::map([
                ("type", "fail".into()),
                ("reason", reason.as_str().into()),
                ("detail", detail.clone().into()),
                ("expected_action", expected_action.as_ref().map_or(CanonValue::Null, Action::to_value)),
            ]),
            ControlResponse::Done => CanonValue::map([("type", "done".into())]),
        }
    }

    fn from_value(v: &CanonValue) -> Result<Self, WireError> {
        match msg_type(v)? {
            "pass" => Ok(ControlResponse::Pass {
                step_index: field(v, "step_index")?
                    .as_i64()
                    .and_then(|i| u64::try_from(i).ok())
                    .ok_or_else(|| schema("step_index must be a non-negative integer"))?,
                payload: v.get("payload").cloned().unwrap_or_default(),
                expected_state: read_opt_state(v.get("expected_state"))?,
            }),
            "fail" => {
                let reason = str_field(v, "reason")?;
                Ok(ControlResponse::Fail {
                    reason: FailReason::parse(reason).ok_or_else(|| schema(format!("unknown reason {reason:?}")))?,
                    detail: v.get("detail").and_then(CanonValue::as_str).unwrap_or_default().to_owned(),
                    expected_action: match v.get("expected_action") {
                        None | Some(CanonValue::Null) => None,
                        Some(a) => Some(Action::from_value(a).map_err(|e| schema(e.to_string()))?),
                    },
                })
            }
            "done" => Ok(ControlResponse::Done),
            other => Err(schema(format!("unknown response type {other:?}"))),
        }
    }
}

/// Length prefix plus canonical body.
pub fn encode_frame<M: Message>(msg: &M) -> Result<Vec<u8>, WireError> {
    frame_body(msg.to_value().encode())
}

fn frame_body(body: Vec<u8>) -> Result<Vec<u8>, WireError> {
    if body.len() > MAX_FRAME_LEN {
        return Err(WireError::MessageTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode_body<M: Message>(body: &[u8]) -> Result<M, WireError> {
    let v = canon_decode(body).map_err(|e| schema(e.to_string()))?;
    M::from_value(&v)
}

/// Reads one frame body. `Ok(None)` means the stream ended cleanly before
/// the first byte of a frame.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match reader.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Frame(format!("stream ended after {got} of 4 length bytes"))),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::Frame(format!("frame length {len} exceeds limit")));
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Frame(format!("stream ended inside a {len}-byte body")),
        _ => e.into(),
    })?;
    Ok(Some(body))
}

/// Reads and decodes one message; a cleanly closed stream is [`WireError::Closed`].
pub fn decode_frame<M: Message, R: Read>(reader: &mut R) -> Result<M, WireError> {
    match read_frame(reader)? {
        Some(body) => decode_body(&body),
        None => Err(WireError::Closed),
    }
}

pub fn write_message<M: Message, W: Write>(writer: &mut W, msg: &M) -> Result<(), WireError> {
    writer.write_all(&encode_frame(msg)?)?;
    writer.flush()?;
    Ok(())
}

/// Incremental decoder for bytes arriving in arbitrary chunks.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    buf: Vec<u8>,
}

impl FrameBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Pops the next complete message, if one is buffered.
    pub fn next_message<M: Message>(&mut self) -> Result<Option<M>, WireError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().expect("4 bytes")) as usize;
        if len > MAX_FRAME_LEN {
            return Err(WireError::Frame(format!("frame length {len} exceeds limit")));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let msg = decode_body(&self.buf[4..4 + len]);
        self.buf.drain(..4 + len);
        msg.map(Some)
    }

    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}
