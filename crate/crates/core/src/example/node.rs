use std::collections::BTreeSet;

use crate::checker::{var_name, Role, REQUEST_VOTE, VOTE_RESP};
use crate::model::{NodeId, State};
use crate::value::CanonValue;

/// A protocol message between election nodes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Message {
    RequestVote { from: u64, to: u64, term: i64 },
    VoteResp { from: u64, to: u64, term: i64, granted: bool },
}

impl Message {
    pub fn to(&self) -> u64 {
        match *self {
            Message::RequestVote { to, .. } | Message::VoteResp { to, .. } => to,
        }
    }

    pub fn is_request(&self) -> bool {
        matches!(self, Message::RequestVote { .. })
    }

    pub fn to_value(&self) -> CanonValue {
        let int = |i: u64| CanonValue::Int(i as i64);
        match *self {
            Message::RequestVote { from, to, term } => CanonValue::map([
                ("type", REQUEST_VOTE.into()),
                ("from", int(from)),
                ("to", int(to)),
                ("term", term.into()),
            ]),
            Message::VoteResp { from, to, term, granted } => CanonValue::map([
                ("type", VOTE_RESP.into()),
                ("from", int(from)),
                ("to", int(to)),
                ("term", term.into()),
                ("granted", granted.into()),
            ]),
        }
    }

    pub fn from_value(v: &CanonValue) -> Option<Message> {
        let id = |k: &str| v.get(k)?.as_i64().and_then(|i| u64::try_from(i).ok());
        let (from, to, term) = (id("from")?, id("to")?, v.get("term")?.as_i64()?);
        match v.get("type")?.as_str()? {
            REQUEST_VOTE => Some(Message::RequestVote { from, to, term }),
            VOTE_RESP => Some(Message::VoteResp { from, to, term, granted: v.get("granted")?.as_bool()? }),
            _ => None,
        }
    }
}

/// Local state of one election node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElectionNode {
    pub id: NodeId,
    pub term: i64,
    pub voted_for: Option<NodeId>,
    pub role: Role,
    pub votes: BTreeSet<u64>,
    pub requested: BTreeSet<u64>,
}

impl ElectionNode {
    pub fn new(id: NodeId) -> Self {
        ElectionNode {
            id,
            term: 0,
            voted_for: None,
            role: Role::Follower,
            votes: BTreeSet::new(),
            requested: BTreeSet::new(),
        }
    }

    pub fn can_timeout(&self, max_term: i64) -> bool {
        self.role != Role::Leader && self.term < max_term
    }

    pub fn timeout(&mut self) {
        self.term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id);
        self.votes = BTreeSet::from([self.id.0]);
        self.requested.clear();
    }

    pub fn can_request_vote(&self, peer: u64) -> bool {
        self.role == Role::Candidate && peer != self.id.0 && !self.requested.contains(&peer)
    }

    pub fn request_vote(&mut self, peer: u64) -> Message {
        self.requested.insert(peer);
        Message::RequestVote { from: self.id.0, to: peer, term: self.term }
    }

    pub fn can_become_leader(&self, node_count: u64) -> bool {
        self.role == Role::Candidate && self.votes.len() as u64 * 2 > node_count
    }

    pub fn become_leader(&mut self) {
        self.role = Role::Leader;
    }

    fn observe_term(&mut self, term: i64) {
        if term > self.term {
            self.term = term;
            self.role = Role::Follower;
            self.voted_for = None;
            self.votes.clear();
            self.requested.clear();
        }
    }

    /// Handles a vote request and returns the reply. With `double_vote`
    /// the node grants even after voting for another candidate.
    pub fn handle_request_vote(&mut self, from: u64, term: i64, double_vote: bool) -> Message {
        self.observe_term(term);
        let free = match self.voted_for {
            None => true,
            Some(c) => c.0 == from || double_vote,
        };
        let granted = term == self.term && free;
        if granted {
            self.voted_for = Some(NodeId(from));
        }
        Message::VoteResp { from: self.id.0, to: from, term: self.term, granted }
    }

    pub fn handle_vote_resp(&mut self, from: u64, term: i64, granted: bool) {
        if term > self.term {
            self.observe_term(term);
        } else if term == self.term && self.role == Role::Candidate && granted {
            self.votes.insert(from);
        }
    }

    /// The node's variables under the shared `<var>_<node>` naming.
    pub fn observed_state(&self) -> State {
        let i = self.id.0;
        let ids = |s: &BTreeSet<u64>| CanonValue::list(s.iter().map(|&v| CanonValue::Int(v as i64)));
        State::new()
            .with(var_name("term", i), self.term)
            .with(var_name("voted_for", i), self.voted_for.map(|v| v.0 as i64))
            .with(var_name("role", i), self.role.as_str())
            .with(var_name("votes", i), ids(&self.votes))
            .with(var_name("requested", i), ids(&self.requested))
    }
}
