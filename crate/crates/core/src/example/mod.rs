//! A small leader-election system instrumented with anchors.
//!
//! Every node runs one thread per kind of step it can take (time out,
//! request a vote from each peer, handle a request, handle a reply,
//! become leader). A thread waits until its step is locally enabled,
//! asks its anchor for permission and then applies the step.
//!
//! Under replay the player grants steps in trace order, but a grant may
//! reach its thread later than the next grant reaches another thread, so
//! effects go through a sequencer: the step granted at trace index `k` is
//! applied only after step `k - 1`. Input steps take the exact message the
//! trace names out of the receiving inbox. After applying an input or
//! output step a node compares its variables against the post-state the
//! player sent with the grant; internal steps are checked by the player
//! when they end.

mod node;
mod suite;

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::anchor::{anchor_init, AnchorConfig, AnchorError, AnchorHandle, Grant};
use crate::checker::Role;
use crate::model::{state_matches, NodeId, State};
use crate::value::CanonValue;

pub use node::{ElectionNode, Message};
pub use suite::{run_suite, run_trace, run_traces, SuiteOptions, SuiteReport};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error("node {node} diverged: {detail}")]
    Diverged { node: NodeId, step: Option<u64>, detail: String },
}

#[derive(Debug, Error)]
pub enum ExampleError {
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Player(#[from] crate::player::PlayerError),
    #[error(transparent)]
    File(#[from] crate::tracegen::FileError),
    #[error(transparent)]
    Digest(#[from] crate::tracegen::DigestMismatch),
    #[error("{0}")]
    Config(String),
    #[error("no leader elected within {0:?}")]
    NoLeader(Duration),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterParams {
    pub node_count: u64,
    /// Nodes never time out into a term above this.
    pub max_term: i64,
    pub double_vote_bug: bool,
}

/// Per-node inbound queues.
#[derive(Debug, Clone, Default)]
pub struct MessageBus {
    inboxes: Vec<VecDeque<Message>>,
}

impl MessageBus {
    pub fn new(node_count: u64) -> Self {
        MessageBus { inboxes: vec![VecDeque::new(); node_count as usize] }
    }

    pub fn send(&mut self, m: Message) {
        self.inboxes[(m.to() - 1) as usize].push_back(m);
    }

    pub fn inbox(&self, node: u64) -> &VecDeque<Message> {
        &self.inboxes[(node - 1) as usize]
    }

    /// Removes `m` from its receiver's inbox.
    pub fn take(&mut self, m: &Message) -> bool {
        let inbox = &mut self.inboxes[(m.to() - 1) as usize];
        match inbox.iter().position(|x| x == m) {
            Some(pos) => inbox.remove(pos).is_some(),
            None => false,
        }
    }

    /// Removes the oldest message to `node` satisfying `pred`.
    pub fn take_first(&mut self, node: u64, pred: impl Fn(&Message) -> bool) -> Option<Message> {
        let inbox = &mut self.inboxes[(node - 1) as usize];
        let pos = inbox.iter().position(pred)?;
        inbox.remove(pos)
    }

    /// All in-flight messages, sorted.
    pub fn in_flight(&self) -> Vec<Message> {
        let mut all: Vec<Message> = self.inboxes.iter().flatten().cloned().collect();
        all.sort();
        all
    }
}

#[derive(Debug)]
struct ClusterState {
    nodes: Vec<ElectionNode>,
    bus: MessageBus,
    /// Number of granted steps applied so far.
    applied: u64,
    /// Set by nodes that granted a vote; read by standalone timeouts.
    heard: Vec<bool>,
    stop: bool,
    error: Option<String>,
    error_step: Option<u64>,
}

impl ClusterState {
    fn node(&self, id: u64) -> &ElectionNode {
        &self.nodes[(id - 1) as usize]
    }

    fn node_mut(&mut self, id: u64) -> &mut ElectionNode {
        &mut self.nodes[(id - 1) as usize]
    }
}

type ErrorHook = Box<dyn Fn(Option<u64>, &str) + Send + Sync>;

/// Nodes, bus and step sequencer shared by every node thread.
pub struct Cluster {
    params: ClusterParams,
    state: Mutex<ClusterState>,
    changed: Condvar,
    on_error: Mutex<Option<ErrorHook>>,
}

impl Cluster {
    pub fn new(params: ClusterParams) -> Arc<Self> {
        let n = params.node_count;
        Arc::new(Cluster {
            params,
            state: Mutex::new(ClusterState {
                nodes: (1..=n).map(|i| ElectionNode::new(NodeId(i))).collect(),
                bus: MessageBus::new(n),
                applied: 0,
                heard: vec![false; n as usize],
                stop: false,
                error: None,
                error_step: None,
            }),
            changed: Condvar::new(),
            on_error: Mutex::new(None),
        })
    }

    pub fn params(&self) -> ClusterParams {
        self.params
    }

    fn lock(&self) -> MutexGuard<'_, ClusterState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn wait_while<'a>(
        &self,
        guard: MutexGuard<'a, ClusterState>,
        cond: impl FnMut(&mut ClusterState) -> bool,
    ) -> MutexGuard<'a, ClusterState> {
        self.changed.wait_while(guard, cond).unwrap_or_else(|e| e.into_inner())
    }

    /// Called once with the first node error and the step it concerns, e.g.
    /// to abort the player.
    pub fn set_error_hook(&self, hook: impl Fn(Option<u64>, &str) + Send + Sync + 'static) {
        *self.on_error.lock().unwrap_or_else(|e| e.into_inner()) = Some(Box::new(hook));
    }

    pub fn stop(&self) {
        self.lock().stop = true;
        self.changed.notify_all();
    }

    pub fn is_stopped(&self) -> bool {
        self.lock().stop
    }

    pub fn applied(&self) -> u64 {
        self.lock().applied
    }

    pub fn error(&self) -> Option<String> {
        self.lock().error.clone()
    }

    /// The granted step the first node error concerns, when known.
    pub fn error_step(&self) -> Option<u64> {
        self.lock().error_step
    }

    pub fn nodes(&self) -> Vec<ElectionNode> {
        self.lock().nodes.clone()
    }

    /// Waits until `steps` granted steps are applied or a node failed.
    pub fn wait_applied(&self, steps: u64, timeout: Duration) -> bool {
        let guard = self.lock();
        let (guard, _) = self
            .changed
            .wait_timeout_while(guard, timeout, |s| s.applied < steps && s.error.is_none() && !s.stop)
            .unwrap_or_else(|e| e.into_inner());
        guard.applied >= steps
    }

    /// The whole system in the model's variable naming, including in-flight messages.
    pub fn global_state(&self) -> State {
        let st = self.lock();
        let mut state = State::new();
        for n in &st.nodes {
            state.vars.extend(n.observed_state().vars);
        }
        state.set("msgs", CanonValue::list(st.bus.in_flight().iter().map(Message::to_value)));
        state
    }

    fn report(&self, err: &NodeError) {
        let detail = err.to_string();
        let step = match err {
            NodeError::Diverged { step, .. } => *step,
            NodeError::Anchor(_) => None,
        };
        {
            let mut st = self.lock();
            if st.stop || st.error.is_some() {
                return;
            }
            st.error = Some(detail.clone());
            st.error_step = step;
        }
        self.changed.notify_all();
        tracing::debug!(%detail, "node error");
        if let Some(hook) = self.on_error.lock().unwrap_or_else(|e| e.into_inner()).as_ref() {
            hook(step, &detail);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    Timeout,
    BecomeLeader,
    RequestVote(u64),
    HandleRequestVote,
    HandleVoteResp,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Timeout => "Timeout",
            Task::BecomeLeader => "BecomeLeader",
            Task::RequestVote(_) => crate::checker::REQUEST_VOTE,
            Task::HandleRequestVote => "HandleRequestVote",
            Task::HandleVoteResp => "HandleVoteResp",
        }
    }

    fn enabled(self, st: &ClusterState, me: u64, params: &ClusterParams) -> bool {
        let node = st.node(me);
        match self {
            Task::Timeout => node.can_timeout(params.max_term),
            Task::BecomeLeader => node.can_become_leader(params.node_count),
            Task::RequestVote(peer) => node.can_request_vote(peer),
            Task::HandleRequestVote => st.bus.inbox(me).iter().any(Message::is_request),
            Task::HandleVoteResp => st.bus.inbox(me).iter().any(|m| !m.is_request()),
        }
    }
}

struct NodeCtx {
    id: NodeId,
    anchors: AnchorHandle,
    cluster: Arc<Cluster>,
}

enum Offer {
    Granted(Option<Grant>),
    Finished,
}

impl NodeCtx {
    fn diverged(&self, grant: Option<&Grant>, detail: String) -> NodeError {
        NodeError::Diverged { node: self.id, step: grant.map(|g| g.step_index), detail }
    }

    fn sequenced(&self) -> bool {
        self.anchors.is_enabled()
    }

    /// Asks the anchor for permission. A finished or already failed run ends the task quietly.
    fn offer(&self, task: Task) -> Result<Offer, NodeError> {
        let result = match task {
            Task::Timeout | Task::BecomeLeader => self.anchors.begin_internal_granted(task.name(), CanonValue::Null),
            Task::RequestVote(peer) => {
                let payload = CanonValue::map([("to", CanonValue::Int(peer as i64))]);
                self.anchors.output_granted(task.name(), payload, None)
            }
            Task::HandleRequestVote | Task::HandleVoteResp => self.anchors.input_granted(task.name(), None, None),
        };
        self.settle(result).map(|g| g.map_or(Offer::Finished, Offer::Granted))
    }

    fn settle(&self, result: Result<Option<Grant>, AnchorError>) -> Result<Option<Option<Grant>>, NodeError> {
        match result {
            Ok(g) => Ok(Some(g)),
            Err(AnchorError::TraceDone | AnchorError::ReplayFail { .. }) => Ok(None),
            Err(_) if self.cluster.is_stopped() => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn run_task(&self, task: Task, seed: u64) -> Result<(), NodeError> {
        let me = self.id.0;
        let params = self.cluster.params;
        let mut rng = StdRng::seed_from_u64(seed);
        loop {
            {
                let st = self.cluster.lock();
                let st = self.cluster.wait_while(st, |s| !s.stop && !task.enabled(s, me, &params));
                if st.stop {
                    return Ok(());
                }
            }
            if task == Task::Timeout && !self.sequenced() {
                thread::sleep(Duration::from_millis(rng.gen_range(10..60)));
                let mut st = self.cluster.lock();
                if std::mem::take(&mut st.heard[(me - 1) as usize]) {
                    continue;
                }
            }
            let grant = match self.offer(task)? {
                Offer::Granted(g) => g,
                Offer::Finished => return Ok(()),
            };
            if !self.apply(task, grant.as_ref())? {
                return Ok(());
            }
        }
    }

    /// Applies a granted step. Returns false when the cluster is stopping.
    fn apply(&self, task: Task, grant: Option<&Grant>) -> Result<bool, NodeError> {
        let me = self.id.0;
        let params = self.cluster.params;
        let mut st = self.cluster.lock();
        if let Some(g) = grant {
            st = self.cluster.wait_while(st, |s| !s.stop && s.applied != g.step_index);
        }
        if st.stop {
            return Ok(false);
        }
        if !task.enabled(&st, me, &params) {
            if grant.is_some() {
                return Err(self.diverged(grant, format!("granted {} but it is not enabled locally", task.name())));
            }
            // lost a race with another thread of this node
            return Ok(true);
        }
        match task {
            Task::Timeout => st.node_mut(me).timeout(),
            Task::BecomeLeader => st.node_mut(me).become_leader(),
            Task::RequestVote(peer) => {
                let m = st.node_mut(me).request_vote(peer);
                st.bus.send(m);
            }
            Task::HandleRequestVote | Task::HandleVoteResp => {
                let m = match grant {
                    Some(g) => {
                        let m = Message::from_value(&g.payload)
                            .ok_or_else(|| self.diverged(grant, format!("unusable {} payload {}", task.name(), g.payload)))?;
                        if !st.bus.take(&m) {
                            return Err(self.diverged(grant, format!("granted delivery of {} not in inbox", g.payload)));
                        }
                        m
                    }
                    None => {
                        let want_request = task == Task::HandleRequestVote;
                        st.bus.take_first(me, |m| m.is_request() == want_request).expect("enabled")
                    }
                };
                match m {
                    Message::RequestVote { from, term, .. } => {
                        let reply = st.node_mut(me).handle_request_vote(from, term, params.double_vote_bug);
                        if matches!(reply, Message::VoteResp { granted: true, .. }) {
                            st.heard[(me - 1) as usize] = true;
                        }
                        st.bus.send(reply);
                    }
                    Message::VoteResp { from, term, granted, .. } => st.node_mut(me).handle_vote_resp(from, term, granted),
                }
            }
        }
        let observed = st.node(me).observed_state();
        let Some(g) = grant else {
            if st.node(me).role == Role::Leader {
                st.stop = true;
            }
            drop(st);
            self.cluster.changed.notify_all();
            return Ok(true);
        };
        if matches!(task, Task::Timeout | Task::BecomeLeader) {
            drop(st);
            let ended = self.settle(self.anchors.end_internal_granted(task.name(), Some(observed)))?;
            if ended.is_none() {
                return Ok(false);
            }
            st = self.cluster.lock();
        } else if let Some(expected) = &g.expected_state {
            let result = state_matches(&observed, expected);
            if !result.is_ok() {
                return Err(self.diverged(grant, format!("after step {} ({}): {result}", g.step_index, task.name())));
            }
        }
        st.applied += 1;
        drop(st);
        self.cluster.changed.notify_all();
        Ok(true)
    }
}

/// Runs every thread of one node until the cluster stops or the run ends.
pub fn run_node(id: NodeId, anchors: AnchorHandle, cluster: Arc<Cluster>, seed: u64) -> Result<(), NodeError> {
    let n = cluster.params.node_count;
    let mut tasks = vec![Task::Timeout, Task::BecomeLeader, Task::HandleRequestVote, Task::HandleVoteResp];
    tasks.extend((1..=n).filter(|&j| j != id.0).map(Task::RequestVote));
    let ctx = Arc::new(NodeCtx { id, anchors, cluster });
    let handles: Vec<_> = tasks
        .into_iter()
        .enumerate()
        .map(|(k, task)| {
            let ctx = ctx.clone();
            let seed = seed ^ (id.0 << 16) ^ k as u64;
            thread::Builder::new()
                .name(format!("node-{}-{}", id.0, task.name()))
                .spawn(move || {
                    let result = ctx.run_task(task, seed);
                    if let Err(e) = &result {
                        ctx.cluster.report(e);
                    }
                    result
                })
                .expect("spawn node thread")
        })
        .collect();
    let mut first = Ok(());
    for h in handles {
        let r = h.join().expect("node thread panicked");
        if first.is_ok() {
            first = r;
        }
    }
    first
}

/// Result of an election run outside replay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElectionOutcome {
    pub leader: NodeId,
    pub term: i64,
    pub nodes: Vec<ElectionNode>,
}

/// Runs a free election with anchors configured from the environment
/// (node ids overridden per node). Returns once a leader exists.
pub fn run_election(node_count: u64, seed: u64, deadline: Duration) -> Result<ElectionOutcome, ExampleError> {
    let base = AnchorConfig::from_env()?;
    let anchors = (1..=node_count)
        .map(|i| anchor_init(AnchorConfig { node: NodeId(i), ..base.clone() }))
        .collect::<Result<Vec<_>, _>>()?;
    run_election_with(node_count, seed, deadline, anchors)
}

pub fn run_election_with(
    node_count: u64,
    seed: u64,
    deadline: Duration,
    anchors: Vec<AnchorHandle>,
) -> Result<ElectionOutcome, ExampleError> {
    if node_count < 2 || anchors.len() as u64 != node_count {
        return Err(ExampleError::Config("need one anchor handle per node and at least 2 nodes".into()));
    }
    let cluster = Cluster::new(ClusterParams { node_count, max_term: i64::MAX, double_vote_bug: false });
    let started = Instant::now();
    let threads: Vec<_> = anchors
        .into_iter()
        .enumerate()
        .map(|(idx, h)| {
            let cluster = cluster.clone();
            let id = NodeId(idx as u64 + 1);
            thread::spawn(move || run_node(id, h, cluster, seed))
        })
        .collect();
    {
        let st = cluster.lock();
        let remaining = deadline.saturating_sub(started.elapsed());
        let _ = cluster.changed.wait_timeout_while(st, remaining, |s| !s.stop && s.error.is_none());
    }
    cluster.stop();
    for t in threads {
        t.join().expect("node panicked")?;
    }
    if let Some(e) = cluster.error() {
        return Err(ExampleError::Config(e));
    }
    let nodes = cluster.nodes();
    let leader = nodes.iter().find(|n| n.role == Role::Leader).ok_or(ExampleError::NoLeader(deadline))?;
    Ok(ElectionOutcome { leader: leader.id, term: leader.term, nodes: nodes.clone() })
}
