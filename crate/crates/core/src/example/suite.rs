use std::path::Path;
use std::thread;
use std::time::Duration;

use crate::anchor::{anchor_init, AnchorConfig};
use crate::checker::var_name;
use crate::model::{state_matches, NodeId, Trace};
use crate::player::{Player, RunReport, RunStatus, DEFAULT_STEP_TIMEOUT};
use crate::tracegen::{read_graph, read_traces, TraceSet};
use crate::wire::FailReason;

use super::{run_node, Cluster, ClusterParams, ExampleError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteOptions {
    pub node_count: u64,
    pub max_term: i64,
    pub step_timeout: Duration,
    /// Run the implementation with the double-vote bug.
    pub inject_bug: bool,
    /// Player address; port 0 picks a fresh port per trace.
    pub listen: String,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            node_count: 3,
            max_term: 1,
            step_timeout: DEFAULT_STEP_TIMEOUT,
            inject_bug: false,
            listen: "127.0.0.1:0".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SuiteReport {
    pub runs: Vec<RunReport>,
    /// The trace set was cut short by its generation limit.
    pub truncated: bool,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.runs.iter().all(RunReport::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunReport> {
        self.runs.iter().filter(|r| !r.passed())
    }

    pub fn first_failure(&self) -> Option<&RunReport> {
        self.failures().next()
    }
}

fn fail(report: &mut RunReport, step: u64, reason: FailReason, detail: String) {
    report.status = RunStatus::Fail;
    report.failed_step = Some(step);
    report.reason = Some(reason);
    report.detail = Some(detail);
}

/// Replays one trace against a fresh cluster of anchored nodes.
pub fn run_trace(trace: &Trace, index: usize, opts: &SuiteOptions) -> Result<RunReport, ExampleError> {
    let n = opts.node_count;
    if (1..=n).any(|i| trace.initial_state.get(&var_name("term", i)).is_none()) {
        return Err(ExampleError::Config(format!("trace {index} is not a {n}-node election trace")));
    }
    let player = Player::bind(opts.listen.as_str(), trace.clone(), index, opts.step_timeout)?;
    let cluster = Cluster::new(ClusterParams { node_count: n, max_term: opts.max_term, double_vote_bug: opts.inject_bug });

    let initial = state_matches(&cluster.global_state(), &trace.initial_state);
    if !initial.is_ok() {
        player.handle().abort(FailReason::StateMismatch, format!("initial state: {initial}"));
        return Ok(player.run());
    }
    let handle = player.handle();
    cluster.set_error_hook(move |step, detail| {
        handle.abort_at(step.map(|s| s as usize), FailReason::StateMismatch, detail)
    });

    let addr = player.local_addr().to_string();
    let anchors = (1..=n)
        .map(|i| anchor_init(AnchorConfig::enabled(addr.clone(), NodeId(i))))
        .collect::<Result<Vec<_>, _>>()?;
    let nodes: Vec<_> = anchors
        .into_iter()
        .enumerate()
        .map(|(k, h)| {
            let cluster = cluster.clone();
            let id = NodeId(k as u64 + 1);
            thread::Builder::new()
                .name(format!("node-{}", id.0))
                .spawn(move || run_node(id, h, cluster, index as u64))
                .expect("spawn node")
        })
        .collect();

    let mut report = player.run();
    if report.passed() {
        // the last grants may still be applying
        let len = trace.len() as u64;
        if !cluster.wait_applied(len, opts.step_timeout) {
            let applied = cluster.applied();
            match cluster.error() {
                Some(detail) => {
                    let step = cluster.error_step().unwrap_or(applied);
                    fail(&mut report, step, FailReason::StateMismatch, detail)
                }
                None => {
                    let detail = format!("granted steps not applied within {:?}", opts.step_timeout);
                    fail(&mut report, applied, FailReason::Timeout, detail)
                }
            }
        } else {
            let result = state_matches(&cluster.global_state(), trace.final_state());
            if !result.is_ok() {
                fail(&mut report, len.saturating_sub(1), FailReason::StateMismatch, format!("final state: {result}"));
            }
        }
    }
    cluster.stop();
    for h in nodes {
        // errors after the verdict are already reflected in the report
        let _ = h.join().expect("node thread panicked");
    }
    Ok(report)
}

/// Replays every trace of `set` in order.
pub fn run_traces(set: &TraceSet, opts: &SuiteOptions) -> Result<SuiteReport, ExampleError> {
    let mut runs = Vec::with_capacity(set.traces.len());
    for (i, trace) in set.traces.iter().enumerate() {
        let report = run_trace(trace, i, opts)?;
        if !report.passed() {
            tracing::info!(trace = i, step = ?report.failed_step, reason = ?report.reason, "trace failed");
        }
        runs.push(report);
    }
    Ok(SuiteReport { runs, truncated: set.truncated })
}

/// Checks that the trace file was generated from the graph file, then replays it.
pub fn run_suite(graph_file: &Path, trace_file: &Path, opts: &SuiteOptions) -> Result<SuiteReport, ExampleError> {
    let (_, digest) = read_graph(graph_file)?;
    let set = read_traces(trace_file)?;
    if let Some(mismatch) = set.digest_mismatch(digest) {
        return Err(mismatch.into());
    }
    run_traces(&set, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checker::{explore, ElectionModel, ElectionParams, ExploreBounds};
    use crate::tracegen::{enumerate_traces, TraceGenLimits};

    fn traces(n: u64, t: i64) -> TraceSet {
        let model = ElectionModel::new(ElectionParams { node_count: n, max_term: t }).unwrap();
        let graph = explore(&model, ExploreBounds::default()).unwrap().graph;
        enumerate_traces(&graph, TraceGenLimits::default()).unwrap()
    }

    fn opts(n: u64, inject_bug: bool) -> SuiteOptions {
        SuiteOptions { node_count: n, max_term: 1, step_timeout: Duration::from_secs(5), inject_bug, ..Default::default() }
    }

    #[test]
    fn correct_nodes_pass_every_two_node_trace() {
        let set = traces(2, 1);
        let report = run_traces(&set, &opts(2, false)).unwrap();
        assert_eq!(report.runs.len(), set.traces.len());
        assert!(report.passed(), "{:?}", report.first_failure());
    }

    #[test]
    fn buggy_nodes_fail_some_three_node_trace() {
        let set = traces(3, 1);
        // depth-first order reaches a contested vote within the first traces
        let report = run_traces(&TraceSet { traces: set.traces[..50].to_vec(), ..set }, &opts(3, true)).unwrap();
        let failure = report.first_failure().expect("bug detected");
        assert!(matches!(failure.reason, Some(FailReason::StateMismatch | FailReason::Timeout)));
    }

    #[test]
    fn empty_suite_passes() {
        let set = TraceSet { graph_digest: 0, traces: vec![], truncated: false };
        assert!(run_traces(&set, &opts(2, false)).unwrap().passed());
    }

    #[test]
    fn wrong_node_count_rejected() {
        let set = traces(2, 1);
        assert!(matches!(run_trace(&set.traces[0], 0, &opts(3, false)), Err(ExampleError::Config(_))));
    }
}
