//! Deterministic replay testing for distributed systems.
//!
//! A model is explored into a state graph, the graph is cut into traces,
//! and a player replays one trace at a time against a real implementation
//! whose nodes call into the player through anchor points.

pub mod anchor;
pub mod checker;
pub mod example;
pub mod model;
pub mod player;
pub mod tracegen;
pub mod value;
pub mod wire;

pub use checker::{explore, ExploreBounds, ExploreResult, Invariant, Model, Violation};
pub use model::{
    action_matches, state_hash, state_matches, Action, ActionKind, MatchMode, MatchResult, NodeId, State, StateGraph,
    StateId, Trace, TraceStep, Transition,
};
pub use tracegen::{enumerate_traces, TraceGenLimits, TraceSet};
pub use value::CanonValue;
