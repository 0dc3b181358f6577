//! Line-oriented graph and trace files.
//!
//! Both formats hold one canonical-encoded record per line, header first.
//! 64-bit ids and digests are stored as the two's-complement `i64` of the
//! unsigned value so they stay inside the canonical integer range.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

use crate::model::{Action, ModelError, State, StateGraph, StateId, Trace, TraceStep, Transition, HASH_SEED};
use crate::value::{canon_decode, CanonValue};

use super::TraceSet;

pub const GRAPH_FORMAT: &str = "detrace-graph";
pub const TRACE_FORMAT: &str = "detrace-traces";
const VERSION: i64 = 1;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

fn format_err(line: usize, msg: impl Into<String>) -> FileError {
    FileError::Format { line, msg: msg.into() }
}

/// A trace file generated from a different graph than the caller's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("trace file was generated from graph {found:016x}, not {expected:016x}")]
pub struct DigestMismatch {
    pub expected: u64,
    pub found: u64,
}

impl TraceSet {
    pub fn digest_mismatch(&self, graph_digest: u64) -> Option<DigestMismatch> {
        (self.graph_digest != graph_digest).then_some(DigestMismatch { expected: graph_digest, found: self.graph_digest })
    }
}

/// `xxh64` of the exact file bytes.
pub fn file_digest(bytes: &[u8]) -> u64 {
    xxh64(bytes, HASH_SEED)
}

fn u64_value(v: u64) -> CanonValue {
    CanonValue::Int(v as i64)
}

fn u64_field(rec: &CanonValue, key: &str, line: usize) -> Result<u64, FileError> {
    rec.get(key)
        .and_then(CanonValue::as_i64)
        .map(|i| i as u64)
        .ok_or_else(|| format_err(line, format!("missing integer field {key:?}")))
}

fn push_line(out: &mut Vec<u8>, rec: &CanonValue) {
    out.extend_from_slice(&rec.encode());
    out.push(b'\n');
}

fn check_header(rec: &CanonValue, format: &str) -> Result<(), FileError> {
    if rec.get("format").and_then(CanonValue::as_str) != Some(format) {
        return Err(format_err(1, format!("expected format {format:?}")));
    }
    match rec.get("version").and_then(CanonValue::as_i64) {
        Some(VERSION) => Ok(()),
        other => Err(format_err(1, format!("unsupported format version {other:?}"))),
    }
}

fn records(bytes: &[u8]) -> impl Iterator<Item = (usize, Result<CanonValue, FileError>)> + '_ {
    bytes
        .split(|&b| b == b'\n')
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| (i + 1, canon_decode(l).map_err(|e| format_err(i + 1, e.to_string()))))
}

pub fn write_graph_bytes(graph: &StateGraph) -> Vec<u8> {
    let mut out = Vec::new();
    push_line(
        &mut out,
        &CanonValue::map([
            ("format", GRAPH_FORMAT.into()),
            ("version", VERSION.into()),
            ("model", graph.model.clone().into()),
        ]),
    );
    for (id, state) in graph.states() {
        push_line(
            &mut out,
            &CanonValue::map([
                ("type", "state".into()),
                ("id", u64_value(id.0)),
                ("initial", graph.is_initial(id).into()),
                ("vars", state.to_value()),
            ]),
        );
    }
    for t in graph.transitions() {
        push_line(
            &mut out,
            &CanonValue::map([
                ("type", "transition".into()),
                ("from", u64_value(t.from.0)),
                ("to", u64_value(t.to.0)),
                ("action", t.action.to_value()),
            ]),
        );
    }
    out
}

/// Writes the graph and returns the digest of the written bytes.
pub fn write_graph(graph: &StateGraph, path: &Path) -> Result<u64, FileError> {
    let bytes = write_graph_bytes(graph);
    fs::write(path, &bytes).map_err(|source| FileError::Io { path: path.to_owned(), source })?;
    Ok(file_digest(&bytes))
}

pub fn read_graph_bytes(bytes: &[u8]) -> Result<StateGraph, FileError> {
    let mut lines = records(bytes);
    let header = match lines.next() {
        Some((_, rec)) => rec?,
        None => return Err(format_err(1, "empty graph file")),
    };
    check_header(&header, GRAPH_FORMAT)?;
    let model = header.get("model").and_then(CanonValue::as_str).unwrap_or_default();
    let mut graph = StateGraph::new(model);
    let model_err = |line: usize| move |e: ModelError| format_err(line, e.to_string());
    for (line, rec) in lines {
        let rec = rec?;
        match rec.get("type").and_then(CanonValue::as_str) {
            Some("state") => {
                let id = StateId(u64_field(&rec, "id", line)?);
                let vars = rec.get("vars").ok_or_else(|| format_err(line, "state without vars"))?;
                let state = State::from_value(vars).map_err(model_err(line))?;
                let (actual, _) = graph.insert_state(state).map_err(model_err(line))?;
                if actual != id {
                    return Err(format_err(line, format!("state id {id} does not match its content hash {actual}")));
                }
                if rec.get("initial").and_then(CanonValue::as_bool) == Some(true) {
                    graph.mark_initial(id).map_err(model_err(line))?;
                }
            }
            Some("transition") => {
                let action = rec.get("action").ok_or_else(|| format_err(line, "transition without action"))?;
                let t = Transition {
                    from: StateId(u64_field(&rec, "from", line)?),
                    action: Action::from_value(action).map_err(model_err(line))?,
                    to: StateId(u64_field(&rec, "to", line)?),
                };
                graph.add_transition(t).map_err(model_err(line))?;
            }
            other => return Err(format_err(line, format!("unknown record type {other:?}"))),
        }
    }
    Ok(graph)
}

/// Reads a graph file, returning it with the digest of the file bytes.
pub fn read_graph(path: &Path) -> Result<(StateGraph, u64), FileError> {
    let bytes = fs::read(path).map_err(|source| FileError::Io { path: path.to_owned(), source })?;
    Ok((read_graph_bytes(&bytes)?, file_digest(&bytes)))
}

fn trace_record(index: usize, trace: &Trace) -> CanonValue {
    CanonValue::map([
        ("type", "trace".into()),
        ("index", CanonValue::Int(index as i64)),
        ("initial", trace.initial_state.to_value()),
        (
            "steps",
            CanonValue::list(trace.steps.iter().map(|s| {
                CanonValue::map([("action", s.action.to_value()), ("post", s.post_state.to_value())])
            })),
        ),
    ])
}

pub fn write_traces_bytes(set: &TraceSet) -> Vec<u8> {
    let mut out = Vec::new();
    push_line(
        &mut out,
        &CanonValue::map([
            ("format", TRACE_FORMAT.into()),
            ("version", VERSION.into()),
            ("graph_digest", u64_value(set.graph_digest)),
            ("truncated", set.truncated.into()),
        ]),
    );
    for (i, t) in set.traces.iter().enumerate() {
        push_line(&mut out, &trace_record(i, t));
    }
    out
}

pub fn write_traces(set: &TraceSet, path: &Path) -> Result<(), FileError> {
    fs::write(path, write_traces_bytes(set)).map_err(|source| FileError::Io { path: path.to_owned(), source })
}

pub fn read_traces_bytes(bytes: &[u8]) -> Result<TraceSet, FileError> {
    let mut lines = records(bytes);
    let header = match lines.next() {
        Some((_, rec)) => rec?,
        None => return Err(format_err(1, "empty trace file")),
    };
    check_header(&header, TRACE_FORMAT)?;
    let graph_digest = u64_field(&header, "graph_digest", 1)?;
    let truncated = header.get("truncated").and_then(CanonValue::as_bool).unwrap_or(false);
    let mut traces = Vec::new();
    for (line, rec) in lines {
        let rec = rec?;
        if rec.get("type").and_then(CanonValue::as_str) != Some("trace") {
            return Err(format_err(line, "expected a trace record"));
        }
        if rec.get("index").and_then(CanonValue::as_i64) != Some(traces.len() as i64) {
            return Err(format_err(line, format!("expected trace index {}", traces.len())));
        }
        let me = |e: ModelError| format_err(line, e.to_string());
        let initial_state =
            State::from_value(rec.get("initial").ok_or_else(|| format_err(line, "trace without initial"))?)
                .map_err(me)?;
        let steps = rec
            .get("steps")
            .and_then(CanonValue::as_list)
            .ok_or_else(|| format_err(line, "trace without steps"))?
            .iter()
            .map(|step| {
                let action = step.get("action").ok_or_else(|| format_err(line, "step without action"))?;
                let post = step.get("post").ok_or_else(|| format_err(line, "step without post"))?;
                Ok(TraceStep { action: Action::from_value(action).map_err(me)?, post_state: State::from_value(post).map_err(me)? })
            })
            .collect::<Result<_, FileError>>()?;
        traces.push(Trace { initial_state, steps });
    }
    Ok(TraceSet { graph_digest, traces, truncated })
}

pub fn read_traces(path: &Path) -> Result<TraceSet, FileError> {
    let bytes = fs::read(path).map_err(|source| FileError::Io { path: path.to_owned(), source })?;
    read_traces_bytes(&bytes)
}
