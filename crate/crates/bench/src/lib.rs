//! Fixtures shared by the benchmarks.

use detrace_core::checker::{explore, ElectionModel, ElectionParams, ExploreBounds};
use detrace_core::model::{Action, State, StateGraph, Trace, TraceStep};
use detrace_core::value::CanonValue;
use detrace_core::wire::{ActionRequest, Phase};
use detrace_core::MatchMode;

pub fn election(node_count: u64, max_term: i64) -> ElectionModel {
    ElectionModel::new(ElectionParams { node_count, max_term }).expect("valid parameters")
}

pub fn election_graph(node_count: u64, max_term: i64) -> StateGraph {
    explore(&election(node_count, max_term), ExploreBounds::default()).expect("explore").graph
}

/// A nested value shaped like an election state with `n` nodes.
pub fn sample_value(n: i64) -> CanonValue {
    CanonValue::map((1..=n).map(|i| {
        let node = CanonValue::map([
            ("term", CanonValue::Int(i)),
            ("role", "candidate".into()),
            ("votes", CanonValue::list((1..=i).map(CanonValue::Int))),
            ("voted_for", CanonValue::Null),
        ]);
        (format!("node_{i}"), node)
    }))
}

/// `len` output steps spread round-robin over three nodes.
pub fn output_trace(len: usize) -> Trace {
    let steps = (0..len)
        .map(|i| TraceStep {
            action: Action::output("Send", i as u64 % 3 + 1, CanonValue::Int(i as i64)),
            post_state: State::new().with("sent", i as i64 + 1),
        })
        .collect();
    Trace { initial_state: State::new().with("sent", 0i64), steps }
}

pub fn request(action: &Action) -> ActionRequest {
    ActionRequest { phase: Phase::Atomic, action: action.clone(), mode: MatchMode::Verify, observed_state: None }
}
