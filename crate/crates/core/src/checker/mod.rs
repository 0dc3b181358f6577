//! Explicit-state exploration of programmatic protocol models.
//!
//! [`explore`] walks the reachable state space breadth first, deduplicates
//! states by content hash, checks every invariant on every discovered state
//! and records each transition into a [`StateGraph`].

mod election;

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::model::{
    is_valid_action_name, state_hash, Action, ModelError, State, StateGraph, StateId, Transition,
};
use crate::value::{canon_encode, CanonValue};

pub use election::{
    at_most_one_leader_per_term, node_var_names, var_name, ElectionModel, ElectionParams, Role,
    AT_MOST_ONE_LEADER_PER_TERM, REQUEST_VOTE, VOTE_RESP,
};

/// Named safety predicate over a single state.
#[derive(Clone)]
pub struct Invariant {
    pub name: String,
    pub holds: Arc<dyn Fn(&State) -> bool + Send + Sync>,
}

impl Invariant {
    pub fn new(name: impl Into<String>, holds: impl Fn(&State) -> bool + Send + Sync + 'static) -> Self {
        Invariant { name: name.into(), holds: Arc::new(holds) }
    }
}

impl fmt::Debug for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Invariant").field("name", &self.name).finish()
    }
}

/// A protocol model: initial states, a successor function and invariants.
///
/// `next` must be a pure function of its input.
pub trait Model {
    fn name(&self) -> &str;
    fn init(&self) -> Vec<State>;
    fn next(&self, state: &State) -> Result<Vec<(Action, State)>, CheckError>;
    fn invariants(&self) -> Vec<Invariant>;
}

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Graph(#[from] ModelError),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("bad model parameters: {0}")]
    BadParams(String),
    #[error("invalid bounds: {0}")]
    BadBounds(String),
}

pub const DEFAULT_MAX_STATES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExploreBounds {
    pub max_states: usize,
    /// `None` explores without a depth limit.
    pub max_depth: Option<usize>,
}

impl Default for ExploreBounds {
    fn default() -> Self {
        ExploreBounds { max_states: DEFAULT_MAX_STATES, max_depth: None }
    }
}

impl ExploreBounds {
    pub fn validate(&self) -> Result<(), CheckError> {
        if self.max_states == 0 {
            return Err(CheckError::BadBounds("max_states must be at least 1".into()));
        }
        if self.max_depth == Some(0) {
            return Err(CheckError::BadBounds("max_depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// A reachable state that breaks an invariant, with a shortest path to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub invariant_name: String,
    pub state: State,
    pub initial: State,
    pub path: Vec<(Action, State)>,
}

impl Violation {
    /// Replays `path` through `model.next` from `initial`; true when every
    /// step is a model transition and the path ends in `state`.
    pub fn replays(&self, model: &dyn Model) -> Result<bool, CheckError> {
        if !model.init().contains(&self.initial) {
            return Ok(false);
        }
        let mut current = self.initial.clone();
        for (action, post) in &self.path {
            let succ = model.next(&current)?;
            if !succ.iter().any(|(a, s)| a == action && s == post) {
                return Ok(false);
            }
            current = post.clone();
        }
        Ok(current == self.state)
    }
}

#[derive(Debug, Clone)]
pub struct ExploreResult {
    pub graph: StateGraph,
    pub violations: Vec<Violation>,
    /// Set when `max_states` stopped exploration before the frontier emptied.
    pub truncated: bool,
    pub max_depth_reached: usize,
}

/// Breadth-first exploration from every initial state.
pub fn explore(model: &dyn Model, bounds: ExploreBounds) -> Result<ExploreResult, CheckError> {
    bounds.validate()?;
    let invariants = model.invariants();
    let mut graph = StateGraph::new(model.name());
    let mut violations = Vec::new();
    // parent pointers for counterexample reconstruction
    let mut parent: HashMap<StateId, Option<(StateId, Action)>> = HashMap::new();
    let mut frontier: VecDeque<(StateId, usize)> = VecDeque::new();
    let mut truncated = false;
    let mut max_depth_reached = 0;

    let mut discover = |graph: &mut StateGraph,
                        state: State,
                        via: Option<(StateId, Action)>,
                        violations: &mut Vec<Violation>|
     -> Result<(StateId, bool), CheckError> {
        let (id, fresh) = graph.insert_state(state)?;
        if fresh {
            parent.insert(id, via);
            let state = graph.state(id).expect("just inserted");
            for inv in &invariants {
                if !(inv.holds)(state) {
                    violations.push(build_violation(graph, &parent, id, &inv.name));
                }
            }
        }
        Ok((id, fresh))
    };

    let mut initial = model.init();
    initial.sort_by_cached_key(|s| canon_encode(&s.to_value()));
    for state in initial {
        if graph.state_count() >= bounds.max_states && graph.state(state_hash(&state)).is_none() {
            truncated = true;
            break;
        }
        let (id, fresh) = discover(&mut graph, state, None, &mut violations)?;
        graph.mark_initial(id)?;
        if fresh {
            frontier.push_back((id, 0));
        }
    }

    while let Some((id, depth)) = frontier.pop_front() {
        max_depth_reached = max_depth_reached.max(depth);
        if bounds.max_depth.is_some_and(|d| depth >= d) {
            continue;
        }
        let state = graph.state(id).expect("frontier states are in the graph").clone();
        let mut successors = model.next(&state)?;
        for (action, _) in &successors {
            check_action(action)?;
        }
        successors.sort_by_cached_key(|(a, s)| (a.canonical_bytes(), canon_encode(&s.to_value())));
        for (action, succ) in successors {
            if graph.state_count() >= bounds.max_states && graph.state(state_hash(&succ)).is_none() {
                truncated = true;
                continue;
            }
            let (to, fresh) = discover(&mut graph, succ, Some((id, action.clone())), &mut violations)?;
            if fresh {
                frontier.push_back((to, depth + 1));
            }
            graph.add_transition(Transition { from: id, action, to })?;
        }
    }

    Ok(ExploreResult { graph, violations, truncated, max_depth_reached })
}

fn check_action(action: &Action) -> Result<(), CheckError> {
    if !is_valid_action_name(&action.name) {
        return Err(CheckError::Model(format!("model emitted malformed action name {:?}", action.name)));
    }
    Ok(())
}

fn build_violation(
    graph: &StateGraph,
    parent: &HashMap<StateId, Option<(StateId, Action)>>,
    id: StateId,
    invariant: &str,
) -> Violation {
    let mut path = Vec::new();
    let mut cursor = id;
    while let Some(Some((prev, action))) = parent.get(&cursor) {
        path.push((action.clone(), graph.state(cursor).expect("on path").clone()));
        cursor = *prev;
    }
    path.reverse();
    Violation {
        invariant_name: invariant.to_owned(),
        state: graph.state(id).expect("violating state").clone(),
        initial: graph.state(cursor).expect("root").clone(),
        path,
    }
}

/// Looks up a builtin model by name.
pub fn builtin_model(name: &str, params: &CanonValue) -> Result<Box<dyn Model + Send + Sync>, CheckError> {
    match name {
        "election" => Ok(Box::new(ElectionModel::new(ElectionParams::from_value(params)?)?)),
        other => Err(CheckError::UnknownModel(other.to_owned())),
    }
}

/// The election model with the double-vote bug in its vote handler.
pub fn inject_bug(model: &ElectionModel) -> ElectionModel {
    model.with_double_vote_bug()
}
