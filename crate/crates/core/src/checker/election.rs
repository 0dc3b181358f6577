//! Leader election by request/response voting over an unordered network.
//!
//! State variables, per node `i` in `1..=node_count`:
//!
//! | variable        | value                                   |
//! |-----------------|-----------------------------------------|
//! | `term_i`        | current term                            |
//! | `voted_for_i`   | node voted for in `term_i`, or null     |
//! | `role_i`        | `"follower"`, `"candidate"`, `"leader"` |
//! | `votes_i`       | sorted list of voters granting `term_i` |
//! | `requested_i`   | sorted list of peers asked in `term_i`  |
//!
//! plus `msgs`, the in-flight messages as a sorted list (a multiset).
//!
//! Actions: `Timeout` and `BecomeLeader` are internal, `RequestVote` is an
//! output of the candidate, `HandleRequestVote` and `HandleVoteResp` are
//! inputs of the receiving node whose payload is the delivered message.

use std::fmt;
use std::str::FromStr;

use crate::model::{Action, NodeId, State};
use crate::value::CanonValue;

use super::{CheckError, Invariant, Model};

pub const AT_MOST_ONE_LEADER_PER_TERM: &str = "AtMostOneLeaderPerTerm";

pub const REQUEST_VOTE: &str = "RequestVote";
pub const VOTE_RESP: &str = "VoteResp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Follower => "follower",
            Role::Candidate => "candidate",
            Role::Leader => "leader",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "follower" => Ok(Role::Follower),
            "candidate" => Ok(Role::Candidate),
            "leader" => Ok(Role::Leader),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// `<var>_<node>`: the naming shared by the model and implementations.
pub fn var_name(var: &str, node: u64) -> String {
    format!("{var}_{node}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElectionParams {
    pub node_count: u64,
    pub max_term: i64,
}

impl ElectionParams {
    pub fn from_value(v: &CanonValue) -> Result<Self, CheckError> {
        let int = |k: &str| {
            v.get(k)
                .and_then(CanonValue::as_i64)
                .ok_or_else(|| CheckError::BadParams(format!("missing integer parameter {k:?}")))
        };
        let node_count = int("node_count")?;
        let max_term = int("max_term")?;
        if node_count < 2 {
            return Err(CheckError::BadParams(format!("node_count must be >= 2, got {node_count}")));
        }
        if max_term < 1 {
            return Err(CheckError::BadParams(format!("max_term must be >= 1, got {max_term}")));
        }
        Ok(ElectionParams { node_count: node_count as u64, max_term })
    }

    pub fn to_value(&self) -> CanonValue {
        CanonValue::map([
            ("max_term", self.max_term.into()),
            ("node_count", CanonValue::Int(self.node_count as i64)),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct NodeVars {
    term: i64,
    voted_for: Option<u64>,
    role: Role,
    votes: Vec<u64>,
    requested: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Msg {
    RequestVote { from: u64, to: u64, term: i64 },
    VoteResp { from: u64, to: u64, term: i64, granted: bool },
}

impl Msg {
    fn to_value(&self) -> CanonValue {
        match *self {
            Msg::RequestVote { from, to, term } => CanonValue::map([
                ("from", CanonValue::Int(from as i64)),
                ("term", term.into()),
                ("to", CanonValue::Int(to as i64)),
                ("type", REQUEST_VOTE.into()),
            ]),
            Msg::VoteResp { from, to, term, granted } => CanonValue::map([
                ("from", CanonValue::Int(from as i64)),
                ("granted", granted.into()),
                ("term", term.into()),
                ("to", CanonValue::Int(to as i64)),
                ("type", VOTE_RESP.into()),
            ]),
        }
    }

    fn from_value(v: &CanonValue) -> Result<Msg, String> {
        let int = |k: &str| v.get(k).and_then(CanonValue::as_i64).ok_or_else(|| format!("message missing {k}"));
        let from = int("from")? as u64;
        let to = int("to")? as u64;
        let term = int("term")?;
        match v.get("type").and_then(CanonValue::as_str) {
            Some(REQUEST_VOTE) => Ok(Msg::RequestVote { from, to, term }),
            Some(VOTE_RESP) => {
                let granted = v.get("granted").and_then(CanonValue::as_bool).ok_or("message missing granted")?;
                Ok(Msg::VoteResp { from, to, term, granted })
            }
            _ => Err(format!("unknown message {v}")),
        }
    }

    fn to(&self) -> u64 {
        match *self {
            Msg::RequestVote { to, .. } | Msg::VoteResp { to, .. } => to,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct World {
    nodes: Vec<NodeVars>,
    msgs: Vec<Msg>,
}

fn id_list(ids: &[u64]) -> CanonValue {
    CanonValue::list(ids.iter().map(|&i| CanonValue::Int(i as i64)))
}

impl World {
    fn node(&self, id: u64) -> &NodeVars {
        &self.nodes[(id - 1) as usize]
    }

    fn node_mut(&mut self, id: u64) -> &mut NodeVars {
        &mut self.nodes[(id - 1) as usize]
    }

    fn to_state(&self) -> State {
        let mut s = State::new();
        for (idx, n) in self.nodes.iter().enumerate() {
            let i = idx as u64 + 1;
            s.set(var_name("term", i), n.term);
            s.set(var_name("voted_for", i), n.voted_for.map(|v| v as i64));
            s.set(var_name("role", i), n.role.as_str());
            s.set(var_name("votes", i), id_list(&n.votes));
            s.set(var_name("requested", i), id_list(&n.requested));
        }
        let mut msgs = self.msgs.clone();
        msgs.sort();
        s.set("msgs", CanonValue::list(msgs.iter().map(Msg::to_value)));
        s
    }

    fn from_state(state: &State, node_count: u64) -> Result<World, String> {
        let get = |k: String| state.get(&k).cloned().ok_or(format!("state missing {k}"));
        let ids = |v: CanonValue| -> Result<Vec<u64>, String> {
            v.as_list()
                .ok_or("expected list")?
                .iter()
                .map(|x| x.as_i64().map(|i| i as u64).ok_or_else(|| "expected integer".to_string()))
                .collect()
        };
        let mut nodes = Vec::new();
        for i in 1..=node_count {
            let term = get(var_name("term", i))?.as_i64().ok_or("term must be an integer")?;
            let voted_for = match get(var_name("voted_for", i))? {
                CanonValue::Null => None,
                CanonValue::Int(v) => Some(v as u64),
                other => return Err(format!("bad voted_for {other}")),
            };
            let role = get(var_name("role", i))?.as_str().ok_or("role must be a string")?.parse()?;
            nodes.push(NodeVars {
                term,
                voted_for,
                role,
                votes: ids(get(var_name("votes", i))?)?,
                requested: ids(get(var_name("requested", i))?)?,
            });
        }
        let msgs = get("msgs".into())?
            .as_list()
            .ok_or("msgs must be a list")?
            .iter()
            .map(Msg::from_value)
            .collect::<Result<_, _>>()?;
        Ok(World { nodes, msgs })
    }
}

fn insert_sorted(list: &mut Vec<u64>, id: u64) {
    if let Err(pos) = list.binary_search(&id) {
        list.insert(pos, id);
    }
}

/// The builtin election protocol model.
#[derive(Debug, Clone)]
pub struct ElectionModel {
    params: ElectionParams,
    double_vote_bug: bool,
}

impl ElectionModel {
    pub fn new(params: ElectionParams) -> Result<Self, CheckError> {
        // re-validate when constructed directly
        ElectionParams::from_value(&params.to_value())?;
        Ok(ElectionModel { params, double_vote_bug: false })
    }

    pub fn params(&self) -> ElectionParams {
        self.params
    }

    pub fn is_buggy(&self) -> bool {
        self.double_vote_bug
    }

    /// Variant whose vote handler grants even after voting for someone else.
    pub fn with_double_vote_bug(&self) -> Self {
        ElectionModel { params: self.params, double_vote_bug: true }
    }

    fn initial_world(&self) -> World {
        let node = NodeVars { term: 0, voted_for: None, role: Role::Follower, votes: vec![], requested: vec![] };
        World { nodes: vec![node; self.params.node_count as usize], msgs: vec![] }
    }

    fn successors(&self, w: &World) -> Vec<(Action, World)> {
        let n = self.params.node_count;
        let mut out = Vec::new();
        for i in 1..=n {
            let me = w.node(i);

            if me.role != Role::Leader && me.term < self.params.max_term {
                let mut next = w.clone();
                let v = next.node_mut(i);
                v.term += 1;
                v.role = Role::Candidate;
                v.voted_for = Some(i);
                v.votes = vec![i];
                v.requested = vec![];
                out.push((Action::internal("Timeout", i, CanonValue::Null), next));
            }

            if me.role == Role::Candidate {
                for j in (1..=n).filter(|&j| j != i && !me.requested.contains(&j)) {
                    let mut next = w.clone();
                    let term = me.term;
                    insert_sorted(&mut next.node_mut(i).requested, j);
                    next.msgs.push(Msg::RequestVote { from: i, to: j, term });
                    let payload = CanonValue::map([("to", CanonValue::Int(j as i64))]);
                    out.push((Action::output(REQUEST_VOTE, i, payload), next));
                }
            }

            if me.role == Role::Candidate && (me.votes.len() as u64) * 2 > n {
                let mut next = w.clone();
                next.node_mut(i).role = Role::Leader;
                out.push((Action::internal("BecomeLeader", i, CanonValue::Null), next));
            }
        }

        let mut delivered: Vec<&Msg> = Vec::new();
        for m in &w.msgs {
            if delivered.contains(&m) {
                continue;
            }
            delivered.push(m);
            let mut next = w.clone();
            let pos = next.msgs.iter().position(|x| x == m).expect("message present");
            next.msgs.remove(pos);
            let name = match *m {
                Msg::RequestVote { from, term, .. } => {
                    let to = m.to();
                    let v = next.node_mut(to);
                    if term > v.term {
                        step_down(v, term);
                    }
                    let free = match v.voted_for {
                        None => true,
                        Some(c) => c == from || self.double_vote_bug,
                    };
                    let granted = term == v.term && free;
                    if granted {
                        v.voted_for = Some(from);
                    }
                    let reply_term = v.term;
                    next.msgs.push(Msg::VoteResp { from: to, to: from, term: reply_term, granted });
                    "HandleRequestVote"
                }
                Msg::VoteResp { from, term, granted, .. } => {
                    let v = next.node_mut(m.to());
                    if term > v.term {
                        step_down(v, term);
                    } else if term == v.term && v.role == Role::Candidate && granted {
                        insert_sorted(&mut v.votes, from);
                    }
                    "HandleVoteResp"
                }
            };
            out.push((Action::input(name, m.to(), m.to_value()), next));
        }
        out
    }
}

fn step_down(v: &mut NodeVars, term: i64) {
    v.term = term;
    v.role = Role::Follower;
    v.voted_for = None;
    v.votes.clear();
    v.requested.clear();
}

impl Model for ElectionModel {
    fn name(&self) -> &str {
        "election"
    }

    fn init(&self) -> Vec<State> {
        vec![self.initial_world().to_state()]
    }

    fn next(&self, state: &State) -> Result<Vec<(Action, State)>, CheckError> {
        let world = World::from_state(state, self.params.node_count).map_err(CheckError::Model)?;
        Ok(self.successors(&world).into_iter().map(|(a, w)| (a, w.to_state())).collect())
    }

    fn invariants(&self) -> Vec<Invariant> {
        let n = self.params.node_count;
        vec![Invariant::new(AT_MOST_ONE_LEADER_PER_TERM, move |s| at_most_one_leader_per_term(s, n))]
    }
}

/// For every term, at most one node is leader in that term.
pub fn at_most_one_leader_per_term(s: &State, node_count: u64) -> bool {
    let mut leader_terms = Vec::new();
    for i in 1..=node_count {
        if s.get(&var_name("role", i)).and_then(CanonValue::as_str) == Some("leader") {
            let term = s.get(&var_name("term", i)).and_then(CanonValue::as_i64);
            if leader_terms.contains(&term) {
                return false;
            }
            leader_terms.push(term);
        }
    }
    true
}

/// Variables the implementation of node `i` reports about itself.
pub fn node_var_names(node: NodeId) -> [String; 5] {
    ["term", "voted_for", "role", "votes", "requested"].map(|v| var_name(v, node.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(n: u64, t: i64) -> ElectionModel {
        ElectionModel::new(ElectionParams { node_count: n, max_term: t }).unwrap()
    }

    #[test]
    fn state_round_trips_through_world() {
        let m = model(3, 2);
        let s = m.init().remove(0);
        let w = World::from_state(&s, 3).unwrap();
        assert_eq!(w.to_state(), s);
        for (_, succ) in m.next(&s).unwrap() {
            assert_eq!(World::from_state(&succ, 3).unwrap().to_state(), succ);
        }
    }

    #[test]
    fn initially_only_timeouts() {
        let m = model(2, 1);
        let succ = m.next(&m.init()[0]).unwrap();
        let names: Vec<_> = succ.iter().map(|(a, _)| (a.name.as_str(), a.node.0)).collect();
        assert_eq!(names, vec![("Timeout", 1), ("Timeout", 2)]);
    }

    #[test]
    fn buggy_shares_init() {
        let m = model(3, 1);
        assert_eq!(m.init(), inject_bug_for_test(&m).init());
    }

    fn inject_bug_for_test(m: &ElectionModel) -> ElectionModel {
        m.with_double_vote_bug()
    }

    #[test]
    fn leader_invariant_detects_two_leaders() {
        let s = State::new()
            .with("role_1", "leader")
            .with("term_1", 1i64)
            .with("role_2", "leader")
            .with("term_2", 1i64);
        assert!(!at_most_one_leader_per_term(&s, 2));
        let s = s.with("term_2", 2i64);
        assert!(at_most_one_leader_per_term(&s, 2));
    }

    #[test]
    fn node_vars_named_by_suffix() {
        assert_eq!(node_var_names(NodeId(2))[0], "term_2");
        assert_eq!(node_var_names(NodeId(2))[4], "requested_2");
    }
}
