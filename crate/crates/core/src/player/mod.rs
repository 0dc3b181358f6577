//! The replay player: serves one trace and admits anchor requests strictly
//! in trace order.
//!
//! A request for a later step is held without a response until its step
//! becomes current. The run fails when a step sees no matching progress
//! within the step timeout, when an observed state disagrees with the
//! trace, or on a protocol error.

mod cursor;
mod server;

use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::model::Action;
use crate::tracegen::{read_traces, FileError};
use crate::value::{canon_decode, CanonValue};
use crate::wire::{FailReason, DEFAULT_PLAYER_ADDR};

pub use cursor::{Cursor, Ticket, Verdict};
pub use server::{Player, PlayerHandle};

pub const DEFAULT_STEP_TIMEOUT: Duration = Duration::from_millis(10_000);

#[derive(Debug, Error)]
pub enum PlayerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    File(#[from] FileError),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlayerConfig {
    pub listen_addr: String,
    pub trace_file: PathBuf,
    pub trace_index: usize,
    pub step_timeout: Duration,
    pub report_path: Option<PathBuf>,
}

impl PlayerConfig {
    pub fn new(trace_file: impl Into<PathBuf>, trace_index: usize) -> Self {
        PlayerConfig {
            listen_addr: DEFAULT_PLAYER_ADDR.into(),
            trace_file: trace_file.into(),
            trace_index,
            step_timeout: DEFAULT_STEP_TIMEOUT,
            report_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Pass,
    Fail,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Pass => "pass",
            RunStatus::Fail => "fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunReport {
    pub trace_index: u64,
    pub status: RunStatus,
    pub failed_step: Option<u64>,
    pub reason: Option<FailReason>,
    /// Human-readable explanation of a failure.
    pub detail: Option<String>,
    pub expected_action: Option<Action>,
    pub received_actions: Vec<Action>,
    pub elapsed_ms: u64,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.status == RunStatus::Pass
    }

    pub fn to_value(&self) -> CanonValue {
        CanonValue::map([
            ("trace_index", CanonValue::Int(self.trace_index as i64)),
            ("status", self.status.as_str().into()),
            ("failed_step", self.failed_step.map(|s| s as i64).into()),
            ("reason", self.reason.map(|r| r.as_str()).into()),
            ("detail", self.detail.clone().into()),
            ("expected_action", self.expected_action.as_ref().map_or(CanonValue::Null, Action::to_value)),
            ("received_actions", CanonValue::list(self.received_actions.iter().map(Action::to_value))),
            ("elapsed_ms", CanonValue::Int(self.elapsed_ms as i64)),
        ])
    }

    pub fn from_value(v: &CanonValue) -> Result<Self, String> {
        let int = |k: &str| -> Result<Option<u64>, String> {
            match v.get(k) {
                None | Some(CanonValue::Null) => Ok(None),
                Some(CanonValue::Int(i)) if *i >= 0 => Ok(Some(*i as u64)),
                Some(other) => Err(format!("{k}: expected non-negative integer, got {other}")),
            }
        };
        let status = match v.get("status").and_then(CanonValue::as_str) {
            Some("pass") => RunStatus::Pass,
            Some("fail") => RunStatus::Fail,
            other => return Err(format!("bad status {other:?}")),
        };
        let reason = match v.get("reason") {
            None | Some(CanonValue::Null) => None,
            Some(r) => Some(r.as_str().and_then(FailReason::parse).ok_or_else(|| format!("bad reason {r}"))?),
        };
        let action = |a: &CanonValue| Action::from_value(a).map_err(|e| e.to_string());
        Ok(RunReport {
            trace_index: int("trace_index")?.ok_or("missing trace_index")?,
            status,
            failed_step: int("failed_step")?,
            reason,
            detail: v.get("detail").and_then(CanonValue::as_str).map(str::to_owned),
            expected_action: match v.get("expected_action") {
                None | Some(CanonValue::Null) => None,
                Some(a) => Some(action(a)?),
            },
            received_actions: v
                .get("received_actions")
                .and_then(CanonValue::as_list)
                .unwrap_or_default()
                .iter()
                .map(action)
                .collect::<Result<_, _>>()?,
            elapsed_ms: int("elapsed_ms")?.unwrap_or(0),
        })
    }

    pub fn read(path: &std::path::Path) -> Result<Self, PlayerError> {
        let bytes = fs::read(path)?;
        let v = canon_decode(bytes.trim_ascii_end()).map_err(|e| PlayerError::Config(e.to_string()))?;
        RunReport::from_value(&v).map_err(PlayerError::Config)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<(), PlayerError> {
        let mut bytes = self.to_value().encode();
        bytes.push(b'\n');
        fs::write(path, bytes)?;
        Ok(())
    }
}

/// Loads the configured trace, replays it and writes the report if asked.
pub fn serve(config: &PlayerConfig) -> Result<RunReport, PlayerError> {
    let set = read_traces(&config.trace_file)?;
    let count = set.traces.len();
    let trace = set.traces.into_iter().nth(config.trace_index).ok_or_else(|| {
        PlayerError::Config(format!("trace index {} out of range, file has {count} traces", config.trace_index))
    })?;
    let player = Player::bind(config.listen_addr.as_str(), trace, config.trace_index, config.step_timeout)?;
    tracing::info!(addr = %player.local_addr(), "player ready");
    let report = player.run();
    if let Some(path) = &config.report_path {
        report.write(path)?;
    }
    Ok(report)
}
