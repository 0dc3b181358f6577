//! Depth-first enumeration of the traces of a state graph.

mod files;
#[cfg(feature = "sqlite")]
mod sqlite;

use std::collections::HashSet;

use thiserror::Error;

use crate::model::{Action, StateGraph, StateId, Trace, TraceStep, Transition};

pub use files::{
    file_digest, read_graph, read_graph_bytes, read_traces, read_traces_bytes, write_graph, write_graph_bytes,
    write_traces, write_traces_bytes, DigestMismatch, FileError, GRAPH_FORMAT, TRACE_FORMAT,
};
#[cfg(feature = "sqlite")]
pub use sqlite::import_sqlite;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceGenLimits {
    pub max_depth: usize,
    pub max_traces: usize,
    pub dedup: bool,
}

impl Default for TraceGenLimits {
    fn default() -> Self {
        TraceGenLimits { max_depth: 64, max_traces: 10_000, dedup: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceSet {
    pub graph_digest: u64,
    pub traces: Vec<Trace>,
    pub truncated: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceGenError {
    #[error("graph has no initial states")]
    EmptyGraph,
    #[error("limits must be at least 1")]
    BadLimits,
}

/// Enumerates traces from every initial state.
///
/// A trace ends at a state without outgoing transitions, at `max_depth`
/// steps, or on the first transition that returns to a state already on the
/// current path (that closing transition is included). Children are visited
/// in canonical action order, so the output order is deterministic.
pub fn enumerate_traces(graph: &StateGraph, limits: TraceGenLimits) -> Result<TraceSet, TraceGenError> {
    enumerate_traces_with_digest(graph, limits, 0)
}

pub fn enumerate_traces_with_digest(
    graph: &StateGraph,
    limits: TraceGenLimits,
    graph_digest: u64,
) -> Result<TraceSet, TraceGenError> {
    if limits.max_depth == 0 || limits.max_traces == 0 {
        return Err(TraceGenError::BadLimits);
    }
    if graph.initial().next().is_none() {
        return Err(TraceGenError::EmptyGraph);
    }
    let mut dfs = Dfs {
        graph,
        limits,
        traces: Vec::new(),
        seen: HashSet::new(),
        truncated: false,
        on_path: HashSet::new(),
        path: Vec::new(),
    };
    for root in graph.initial() {
        if dfs.done() {
            break;
        }
        dfs.on_path.insert(root);
        dfs.visit(root, root);
        dfs.on_path.remove(&root);
    }
    Ok(TraceSet { graph_digest, traces: dfs.traces, truncated: dfs.truncated })
}

struct Dfs<'g> {
    graph: &'g StateGraph,
    limits: TraceGenLimits,
    traces: Vec<Trace>,
    seen: HashSet<Vec<Action>>,
    truncated: bool,
    on_path: HashSet<StateId>,
    path: Vec<&'g Transition>,
}

impl<'g> Dfs<'g> {
    fn done(&self) -> bool {
        self.truncated
    }

    fn visit(&mut self, root: StateId, at: StateId) {
        if self.path.len() >= self.limits.max_depth {
            self.emit(root);
            return;
        }
        let children = self.graph.outgoing_sorted(at);
        if children.is_empty() {
            self.emit(root);
            return;
        }
        for t in children {
            if self.done() {
                return;
            }
            self.path.push(t);
            if self.on_path.contains(&t.to) {
                self.emit(root);
            } else {
                self.on_path.insert(t.to);
                self.visit(root, t.to);
                self.on_path.remove(&t.to);
            }
            self.path.pop();
        }
    }

    fn emit(&mut self, root: StateId) {
        let key: Vec<Action> = self.path.iter().map(|t| t.action.clone()).collect();
        if self.limits.dedup && self.seen.contains(&key) {
            return;
        }
        if self.traces.len() >= self.limits.max_traces {
            self.truncated = true;
            return;
        }
        if self.limits.dedup {
            self.seen.insert(key);
        }
        let state = |id| self.graph.state(id).expect("graph is closed").clone();
        self.traces.push(Trace {
            initial_state: state(root),
            steps: self
                .path
                .iter()
                .map(|t| TraceStep { action: t.action.clone(), post_state: state(t.to) })
                .collect(),
        });
    }
}

/// True iff `trace` starts in an initial state and every step is a transition.
pub fn validate_trace(trace: &Trace, graph: &StateGraph) -> bool {
    let mut current = crate::model::state_hash(&trace.initial_state);
    if !graph.is_initial(current) || graph.state(current) != Some(&trace.initial_state) {
        return false;
    }
    for step in &trace.steps {
        let to = crate::model::state_hash(&step.post_state);
        if graph.state(to) != Some(&step.post_state) {
            return false;
        }
        let t = Transition { from: current, action: step.action.clone(), to };
        if !graph.has_transition(&t) {
            return false;
        }
        current = to;
    }
    true
}
