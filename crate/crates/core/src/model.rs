//! Actions, states, state graphs and traces, plus the matching rules the
//! player uses to compare what an implementation did with what a trace
//! expects.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use indexmap::{IndexMap, IndexSet};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

use crate::value::{canon_encode, CanonValue};

/// Seed for every content hash in the toolkit (`xxh64`).
pub const HASH_SEED: u64 = 0;

/// Identifies the task partition (node) that yields an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<NodeId> for CanonValue {
    fn from(n: NodeId) -> Self {
        // node ids far beyond i64 range are not meaningful test configurations
        CanonValue::Int(i64::try_from(n.0).expect("node id fits in i64"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActionKind {
    Input,
    Output,
    Internal,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Input => "input",
            ActionKind::Output => "output",
            ActionKind::Internal => "internal",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "input" => Ok(ActionKind::Input),
            "output" => Ok(ActionKind::Output),
            "internal" => Ok(ActionKind::Internal),
            other => Err(ModelError::Malformed(format!("unknown action kind {other:?}"))),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid action name {0:?}")]
    InvalidName(String),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("state id {0} collides with a different state")]
    HashCollision(StateId),
    #[error("transition refers to unknown state {0}")]
    UnknownState(StateId),
}

/// One instance of an action signature: who did what, with which payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Action {
    pub kind: ActionKind,
    pub name: String,
    pub node: NodeId,
    pub payload: CanonValue,
}

pub fn is_valid_action_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl Action {
    pub fn new(
        kind: ActionKind,
        name: impl Into<String>,
        node: NodeId,
        payload: CanonValue,
    ) -> Result<Self, ModelError> {
        let name = name.into();
        if !is_valid_action_name(&name) {
            return Err(ModelError::InvalidName(name));
        }
        Ok(Action { kind, name, node, payload })
    }

    pub fn input(name: &str, node: u64, payload: CanonValue) -> Self {
        Self::new(ActionKind::Input, name, NodeId(node), payload).expect("valid action name")
    }

    pub fn output(name: &str, node: u64, payload: CanonValue) -> Self {
        Self::new(ActionKind::Output, name, NodeId(node), payload).expect("valid action name")
    }

    pub fn internal(name: &str, node: u64, payload: CanonValue) -> Self {
        Self::new(ActionKind::Internal, name, NodeId(node), payload).expect("valid action name")
    }

    pub fn to_value(&self) -> CanonValue {
        CanonValue::map([
            ("kind", self.kind.as_str().into()),
            ("name", self.name.clone().into()),
            ("node", self.node.into()),
            ("payload", self.payload.clone()),
        ])
    }

    pub fn from_value(v: &CanonValue) -> Result<Self, ModelError> {
        let field = |k: &str| {
            v.get(k).ok_or_else(|| ModelError::Malformed(format!("action missing {k:?}")))
        };
        let kind = field("kind")?
            .as_str()
            .ok_or_else(|| ModelError::Malformed("action kind must be a string".into()))?
            .parse()?;
        let name = field("name")?
            .as_str()
            .ok_or_else(|| ModelError::Malformed("action name must be a string".into()))?;
        let node = node_from_value(field("node")?)?;
        let payload = v.get("payload").cloned().unwrap_or_default();
        Action::new(kind, name, node, payload)
    }

    /// Canonical bytes; the sort key for deterministic exploration order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canon_encode(&self.to_value())
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}@{}", self.kind, self.name, self.node)?;
        if !self.payload.is_null() {
            write!(f, " {}", self.payload)?;
        }
        Ok(())
    }
}

pub(crate) fn node_from_value(v: &CanonValue) -> Result<NodeId, ModelError> {
    v.as_i64()
        .and_then(|i| u64::try_from(i).ok())
        .map(NodeId)
        .ok_or_else(|| ModelError::Malformed(format!("node id must be a non-negative integer, got {v}")))
}

/// Values of named state variables.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct State {
    pub vars: BTreeMap<String, CanonValue>,
}

impl State {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<CanonValue>) -> Self {
        self.vars.insert(name.into(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&CanonValue> {
        self.vars.get(name)
    }

    pub fn set(&mut self, name: impl Into<String>, value: impl Into<CanonValue>) {
        self.vars.insert(name.into(), value.into());
    }

    pub fn to_value(&self) -> CanonValue {
        CanonValue::Map(self.vars.clone())
    }

    pub fn from_value(v: &CanonValue) -> Result<Self, ModelError> {
        match v {
            CanonValue::Map(m) => Ok(State { vars: m.clone() }),
            other => Err(ModelError::Malformed(format!("state must be a map, got {other}"))),
        }
    }

    /// Keeps only the variables whose names satisfy `keep`.
    pub fn project(&self, keep: impl Fn(&str) -> bool) -> State {
        State {
            vars: self.vars.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_value())
    }
}

/// Content hash of a state's canonical encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateId(pub u64);

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// `xxh64` with seed [`HASH_SEED`] over the canonical encoding of `s.vars`.
pub fn state_hash(s: &State) -> StateId {
    StateId(xxh64(&canon_encode(&s.to_value()), HASH_SEED))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Transition {
    pub from: StateId,
    pub action: Action,
    pub to: StateId,
}

/// States in discovery order, the initial subset, and labelled transitions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StateGraph {
    pub model: String,
    states: IndexMap<StateId, State>,
    initial: IndexSet<StateId>,
    transitions: Vec<Transition>,
    transition_set: std::collections::HashSet<Transition>,
    outgoing: std::collections::HashMap<StateId, Vec<usize>>,
}

impl StateGraph {
    pub fn new(model: impl Into<String>) -> Self {
        StateGraph { model: model.into(), ..Default::default() }
    }

    /// Inserts `state` under its content hash. Returns the id and whether the
    /// state was new. A hash match with different contents is an error.
    pub fn insert_state(&mut self, state: State) -> Result<(StateId, bool), ModelError> {
        let id = state_hash(&state);
        self.insert_state_with_id(id, state)
    }

    pub(crate) fn insert_state_with_id(
        &mut self,
        id: StateId,
        state: State,
    ) -> Result<(StateId, bool), ModelError> {
        match self.states.get(&id) {
            Some(existing) if *existing == state => Ok((id, false)),
            Some(_) => Err(ModelError::HashCollision(id)),
            None => {
                self.states.insert(id, state);
                Ok((id, true))
            }
        }
    }

    pub fn mark_initial(&mut self, id: StateId) -> Result<(), ModelError> {
        if !self.states.contains_key(&id) {
            return Err(ModelError::UnknownState(id));
        }
        self.initial.insert(id);
        Ok(())
    }

    /// Adds a transition; duplicates are ignored. Returns whether it was new.
    pub fn add_transition(&mut self, t: Transition) -> Result<bool, ModelError> {
        for id in [t.from, t.to] {
            if !self.states.contains_key(&id) {
                return Err(ModelError::UnknownState(id));
            }
        }
        if self.transition_set.contains(&t) {
            return Ok(false);
        }
        self.outgoing.entry(t.from).or_default().push(self.transitions.len());
        self.transition_set.insert(t.clone());
        self.transitions.push(t);
        Ok(true)
    }

    pub fn state(&self, id: StateId) -> Option<&State> {
        self.states.get(&id)
    }

    pub fn states(&self) -> impl Iterator<Item = (StateId, &State)> {
        self.states.iter().map(|(id, s)| (*id, s))
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn initial(&self) -> impl Iterator<Item = StateId> + '_ {
        self.initial.iter().copied()
    }

    pub fn is_initial(&self, id: StateId) -> bool {
        self.initial.contains(&id)
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn has_transition(&self, t: &Transition) -> bool {
        self.transition_set.contains(t)
    }

    /// Outgoing transitions of `id` sorted by canonical action bytes, then target.
    pub fn outgoing_sorted(&self, id: StateId) -> Vec<&Transition> {
        let mut out: Vec<&Transition> = self
            .outgoing
            .get(&id)
            .map(|idx| idx.iter().map(|&i| &self.transitions[i]).collect())
            .unwrap_or_default();
        out.sort_by_cached_key(|t| (t.action.canonical_bytes(), t.to));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraceStep {
    pub action: Action,
    pub post_state: State,
}

/// `s0, a1, s1, ..., an, sn`: the unit of replay.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trace {
    pub initial_state: State,
    pub steps: Vec<TraceStep>,
}

impl Trace {
    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.steps.iter().map(|s| &s.action)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State before step `i` executes.
    pub fn pre_state(&self, i: usize) -> &State {
        if i == 0 {
            &self.initial_state
        } else {
            &self.steps[i - 1].post_state
        }
    }

    pub fn final_state(&self) -> &State {
        self.steps.last().map_or(&self.initial_state, |s| &s.post_state)
    }
}

/// How a requested action is compared against the expected one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchMode {
    /// All four fields must be equal.
    Verify,
    /// Payload is ignored; the player supplies it from the trace.
    Drive,
}

impl MatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchMode::Verify => "verify",
            MatchMode::Drive => "drive",
        }
    }
}

pub fn action_matches(requested: &Action, expected: &Action, mode: MatchMode) -> bool {
    let head = requested.kind == expected.kind
        && requested.name == expected.name
        && requested.node == expected.node;
    match mode {
        MatchMode::Verify => head && requested.payload == expected.payload,
        MatchMode::Drive => head,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarMismatch {
    pub var: String,
    pub observed: CanonValue,
    /// `None` when the expected state has no such variable.
    pub expected: Option<CanonValue>,
}

impl fmt::Display for VarMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.expected {
            Some(e) => write!(f, "{}: {}≠{}", self.var, self.observed, e),
            None => write!(f, "{}: {} (not in model)", self.var, self.observed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchResult {
    Ok,
    Mismatch(Vec<VarMismatch>),
}

impl MatchResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, MatchResult::Ok)
    }
}

impl fmt::Display for MatchResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchResult::Ok => f.write_str("ok"),
            MatchResult::Mismatch(list) => {
                let parts: Vec<String> = list.iter().map(ToString::to_string).collect();
                write!(f, "mismatch[{}]", parts.join(", "))
            }
        }
    }
}

/// Compares the variables an implementation reports against the model.
///
/// Only variables present in `observed` are checked.
pub fn state_matches(observed: &State, expected: &State) -> MatchResult {
    let mismatches: Vec<VarMismatch> = observed
        .vars
        .iter()
        .filter_map(|(var, value)| match expected.vars.get(var) {
            Some(e) if e == value => None,
            e => Some(VarMismatch { var: var.clone(), observed: value.clone(), expected: e.cloned() }),
        })
        .collect();
    if mismatches.is_empty() {
        MatchResult::Ok
    } else {
        MatchResult::Mismatch(mismatches)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::strategies::canon_value;
    use proptest::prelude::*;

    #[test]
    fn action_name_pattern() {
        assert!(is_valid_action_name("RequestVote"));
        assert!(is_valid_action_name("_x9"));
        assert!(!is_valid_action_name(""));
        assert!(!is_valid_action_name("9x"));
        assert!(!is_valid_action_name("a-b"));
        assert!(Action::new(ActionKind::Input, "bad name", NodeId(0), CanonValue::Null).is_err());
    }

    #[test]
    fn state_hash_is_deterministic() {
        let a = State::new().with("x", 1i64).with("y", "z");
        let b = State::new().with("y", "z").with("x", 1i64);
        assert_eq!(state_hash(&a), state_hash(&b));
        assert_eq!(state_hash(&State::new()), state_hash(&State::new()));
    }

    #[test]
    fn state_hash_golden() {
        // frozen from the Python xxhash package over the bytes {"x":1} and {}
        assert_eq!(state_hash(&State::new().with("x", 1i64)), StateId(0x65c8_7bd4_eb70_04b9));
        assert_eq!(state_hash(&State::new()), StateId(0x2e14_72b5_7af2_94d1));
    }

    #[test]
    fn action_matches_modes() {
        let a = Action::input("Recv", 1, 5i64.into());
        let b = Action::input("Recv", 1, 6i64.into());
        assert!(action_matches(&a, &a, MatchMode::Verify));
        assert!(!action_matches(&a, &b, MatchMode::Verify));
        assert!(action_matches(&a, &b, MatchMode::Drive));
        let out = Action::output("Recv", 1, 5i64.into());
        assert!(!action_matches(&a, &out, MatchMode::Verify));
        assert!(!action_matches(&a, &out, MatchMode::Drive));
        let other_node = Action::input("Recv", 2, 5i64.into());
        assert!(!action_matches(&a, &other_node, MatchMode::Drive));
    }

    #[test]
    fn state_matches_projection() {
        let expected = State::new().with("term", 2i64).with("log", CanonValue::list([1i64.into()]));
        assert!(state_matches(&State::new(), &expected).is_ok());
        assert!(state_matches(&State::new().with("term", 2i64), &expected).is_ok());
        match state_matches(&State::new().with("term", 3i64), &expected) {
            MatchResult::Mismatch(m) => {
                assert_eq!(m.len(), 1);
                assert_eq!(m[0].var, "term");
                assert_eq!(m[0].observed, CanonValue::Int(3));
                assert_eq!(m[0].expected, Some(CanonValue::Int(2)));
            }
            MatchResult::Ok => panic!("expected mismatch"),
        }
        let extra = state_matches(&State::new().with("ghost", 1i64), &expected);
        assert!(!extra.is_ok());
        assert_eq!(extra.to_string(), "mismatch[ghost: 1 (not in model)]");
    }

    #[test]
    fn graph_rejects_collisions_and_dangling() {
        let mut g = StateGraph::new("t");
        let s0 = State::new().with("x", 0i64);
        let (id0, fresh) = g.insert_state(s0.clone()).unwrap();
        assert!(fresh);
        assert_eq!(g.insert_state(s0).unwrap(), (id0, false));
        let err = g.insert_state_with_id(id0, State::new().with("x", 1i64)).unwrap_err();
        assert_eq!(err, ModelError::HashCollision(id0));
        let t = Transition { from: id0, action: Action::internal("a", 0, CanonValue::Null), to: StateId(7) };
        assert_eq!(g.add_transition(t).unwrap_err(), ModelError::UnknownState(StateId(7)));
        assert!(g.mark_initial(StateId(7)).is_err());
    }

    #[test]
    fn graph_ignores_duplicate_transitions() {
        let mut g = StateGraph::new("t");
        let (a, _) = g.insert_state(State::new().with("x", 0i64)).unwrap();
        let (b, _) = g.insert_state(State::new().with("x", 1i64)).unwrap();
        let t = Transition { from: a, action: Action::internal("inc", 0, CanonValue::Null), to: b };
        assert!(g.add_transition(t.clone()).unwrap());
        assert!(!g.add_transition(t).unwrap());
        assert_eq!(g.transitions().len(), 1);
    }

    fn small_state() -> impl Strategy<Value = State> {
        prop::collection::btree_map("[a-e]", canon_value(), 0..5).prop_map(|vars| State { vars })
    }

    proptest! {
        #[test]
        fn state_matches_reflexive(s in small_state()) {
            prop_assert!(state_matches(&s, &s).is_ok());
        }

        #[test]
        fn state_matches_monotone(observed in small_state(), expected in small_state(), drop in "[a-e]") {
            if state_matches(&observed, &expected).is_ok() {
                let mut smaller = observed.clone();
                smaller.vars.remove(&drop);
                prop_assert!(state_matches(&smaller, &expected).is_ok());
            }
            let sub = expected.project(|k| k != drop);
            prop_assert!(state_matches(&sub, &expected).is_ok());
        }

        #[test]
        fn drive_mode_is_projection_equivalence(
            p1 in canon_value(), p2 in canon_value(), node in 0u64..3, name in "[ab]", kind in 0usize..3
        ) {
            let kinds = [ActionKind::Input, ActionKind::Output, ActionKind::Internal];
            let a = Action::new(kinds[kind], name.clone(), NodeId(node), p1).unwrap();
            let b = Action::new(kinds[kind], name, NodeId(node), p2).unwrap();
            prop_assert!(action_matches(&a, &a, MatchMode::Verify));
            prop_assert!(action_matches(&a, &b, MatchMode::Drive));
            prop_assert!(action_matches(&b, &a, MatchMode::Drive));
            prop_assert_eq!(action_matches(&a, &b, MatchMode::Verify), a == b);
        }
    }
}
