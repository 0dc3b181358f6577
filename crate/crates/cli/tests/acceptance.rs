//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::net::TcpListener;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use common::{detrace, path, run, spawn_player, write_diamond};
use detrace_core::anchor::{anchor_init, AnchorConfig, AnchorError};
use detrace_core::checker::{explore, ElectionModel, ElectionParams, ExploreBounds};
use detrace_core::example::{run_trace, run_traces, SuiteOptions};
use detrace_core::model::{state_hash, Action, NodeId, State, StateGraph, StateId, Trace, TraceStep, Transition};
use detrace_core::player::Player;
use detrace_core::tracegen::{enumerate_traces, TraceGenLimits, TraceSet};
use detrace_core::value::{canon_decode, canon_encode, CanonValue};
use detrace_core::wire::{encode_frame, ControlRequest, FailReason, PROTO_VERSION};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::TestRunner;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const ROUND_TRIP_CASES: u32 = 1_000;
const DAG_CASES: usize = 100;
const DAG_LIMIT: Duration = Duration::from_secs(10);
const REORDER_LIMIT: Duration = Duration::from_secs(30);
const PLAYER_TIMEOUT: Duration = Duration::from_millis(1_000);
const TIMEOUT_SLACK: Duration = Duration::from_secs(2);
const REFINEMENT_LIMIT: Duration = Duration::from_secs(300);
const REPLAY_STEP_TIMEOUT: Duration = Duration::from_secs(10);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok { Ok(()) } else { Err(msg()) }
}

// 1: canonical encoding

fn canon_value() -> impl Strategy<Value = CanonValue> {
    let leaf = prop_oneof![
        Just(CanonValue::Null),
        any::<bool>().prop_map(CanonValue::Bool),
        any::<i64>().prop_map(CanonValue::Int),
        any::<String>().prop_map(CanonValue::Str),
    ];
    leaf.prop_recursive(4, 48, 6, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..6).prop_map(CanonValue::List),
            prop::collection::btree_map(any::<String>(), inner, 0..6).prop_map(CanonValue::Map),
        ]
    })
}

fn canonical_encoding() -> Outcome {
    let mut runner = TestRunner::deterministic();
    let strategy = canon_value();
    for case in 0..ROUND_TRIP_CASES {
        let v = strategy.new_tree(&mut runner).map_err(|e| e.to_string())?.current();
        let bytes = canon_encode(&v);
        let back = canon_decode(&bytes).map_err(|e| format!("case {case}: {e}"))?;
        ensure(back == v, || format!("case {case}: round trip changed {v}"))?;
        ensure(canon_encode(&back) == bytes, || format!("case {case}: re-encoding differs"))?;
    }

    // key order is by bytes, whatever the insertion order
    let map = CanonValue::map([("b", 1i64.into()), ("a", CanonValue::list([true.into(), CanonValue::Null]))]);
    ensure(canon_encode(&map) == br#"{"a":[true,null],"b":1}"#, || "sorted-key golden".into())?;

    let hello = encode_frame(&ControlRequest::Hello { node: NodeId(1), proto_version: PROTO_VERSION })
        .map_err(|e| e.to_string())?;
    let body = br#"{"node":1,"proto_version":1,"type":"hello"}"#;
    let mut golden = vec![0, 0, 0, body.len() as u8];
    golden.extend_from_slice(body);
    ensure(hello == golden, || "hello frame golden".into())?;

    // xxh64, seed 0, over {"x":1}, as computed by the Python xxhash package
    let h = state_hash(&State::new().with("x", 1i64));
    ensure(h == StateId(0x65c8_7bd4_eb70_04b9), || format!("state hash golden, got {h:?}"))?;

    Ok(format!("{ROUND_TRIP_CASES} round trips, 3 goldens"))
}

// 2: trace enumeration against brute force

/// Edges only go from lower to higher state index, so the graph is acyclic.
fn random_dag(rng: &mut StdRng) -> (usize, Vec<usize>, Vec<(usize, usize)>) {
    let n = rng.gen_range(1..=12);
    let mut edges = Vec::new();
    if n > 1 {
        for _ in 0..rng.gen_range(0..=20) {
            let a = rng.gen_range(0..n - 1);
            edges.push((a, rng.gen_range(a + 1..n)));
        }
    }
    let mut initial: Vec<usize> = (0..rng.gen_range(1..=2.min(n))).map(|_| rng.gen_range(0..n)).collect();
    initial.sort();
    initial.dedup();
    (n, initial, edges)
}

/// Every path from an initial state that ends in a state with no outgoing
/// edge, as (start, [(edge index, target)]). Edge labels are unique, so the
/// only repeated action sequence is the empty one of a terminal initial
/// state; like the enumerator, keep the first such state in `initial` order.
fn maximal_paths(n: usize, initial: &[usize], edges: &[(usize, usize)]) -> BTreeSet<(usize, Vec<(usize, usize)>)> {
    let mut out = BTreeSet::new();
    // reversed so the stack pops initial states in order
    let mut stack: Vec<(usize, Vec<(usize, usize)>)> = initial.iter().rev().map(|&s| (s, vec![])).collect();
    while let Some((start, path)) = stack.pop() {
        let at = path.last().map_or(start, |&(_, t)| t);
        assert!(at < n);
        let next: Vec<_> = edges.iter().enumerate().filter(|(_, e)| e.0 == at).collect();
        if next.is_empty() {
            let empty_seen = path.is_empty() && out.iter().any(|(_, p): &(usize, Vec<_>)| p.is_empty());
            if !empty_seen {
                out.insert((start, path));
            }
            continue;
        }
        for (k, &(_, to)) in next {
            let mut p = path.clone();
            p.push((k, to));
            stack.push((start, p));
        }
    }
    out
}

fn trace_enumeration() -> Outcome {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut total = 0;
    for case in 0..DAG_CASES {
        let (n, initial, edges) = random_dag(&mut rng);
        let state = |i: usize| State::new().with("s", i as i64);
        let mut g = StateGraph::new("dag");
        let ids: Vec<StateId> = (0..n).map(|i| g.insert_state(state(i)).unwrap().0).collect();
        for &i in &initial {
            g.mark_initial(ids[i]).unwrap();
        }
        for (k, &(a, b)) in edges.iter().enumerate() {
            let action = Action::internal(&format!("E{k}"), 1, CanonValue::Null);
            g.add_transition(Transition { from: ids[a], action, to: ids[b] }).unwrap();
        }
        let set = enumerate_traces(&g, TraceGenLimits::default()).map_err(|e| e.to_string())?;
        ensure(!set.truncated, || format!("case {case}: truncated"))?;

        let state_index = |s: &State| s.get("s").and_then(CanonValue::as_i64).unwrap() as usize;
        let got: Vec<(usize, Vec<(usize, usize)>)> = set
            .traces
            .iter()
            .map(|t| {
                let steps =
                    t.steps.iter().map(|s| (s.action.name[1..].parse().unwrap(), state_index(&s.post_state))).collect();
                (state_index(&t.initial_state), steps)
            })
            .collect();
        let unique: BTreeSet<_> = got.iter().cloned().collect();
        let expected = maximal_paths(n, &initial, &edges);
        ensure(unique.len() == got.len(), || format!("case {case}: duplicate traces"))?;
        ensure(unique == expected, || {
            format!("case {case}: {} traces, brute force found {}", got.len(), expected.len())
        })?;
        total += got.len();
    }
    let elapsed = started.elapsed();
    ensure(elapsed < DAG_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!("{DAG_CASES} DAGs, {total} traces, {elapsed:.2?}"))
}

// 3: reorder enforcement over sockets

fn output_trace(nodes: &[u64]) -> Trace {
    let steps = nodes
        .iter()
        .enumerate()
        .map(|(i, &n)| TraceStep {
            action: Action::output("Send", n, CanonValue::Int(i as i64)),
            post_state: State::new().with("sent", i as i64 + 1),
        })
        .collect();
    Trace { initial_state: State::new().with("sent", 0i64), steps }
}

/// Issues the trace's actions in `order`, each request reaching the player
/// before the next is sent, and returns the grant log.
fn replay_in_order(trace: &Trace, order: &[usize]) -> Result<Vec<Action>, String> {
    let player = Player::bind("127.0.0.1:0", trace.clone(), 0, Duration::from_secs(5)).map_err(|e| e.to_string())?;
    let addr = player.local_addr().to_string();
    let handle = player.handle();
    let mut clients = Vec::new();
    for (sent, &i) in order.iter().enumerate() {
        let action = trace.steps[i].action.clone();
        let anchor = anchor_init(AnchorConfig::enabled(addr.clone(), action.node)).map_err(|e| e.to_string())?;
        clients.push(thread::spawn(move || anchor.output(&action.name, action.payload.clone(), None)));
        let deadline = Instant::now() + Duration::from_secs(5);
        while handle.received_actions().len() <= sent {
            ensure(Instant::now() < deadline, || "request never arrived".into())?;
            thread::sleep(Duration::from_millis(1));
        }
    }
    let report = player.run();
    for c in clients {
        c.join().unwrap().map_err(|e| format!("client failed: {e}"))?;
    }
    ensure(report.passed(), || format!("run failed: {:?}", report.detail))?;
    Ok(player.grant_log())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for at in 0..=p.len() {
            let mut q = p.clone();
            q.insert(at, n - 1);
            out.push(q);
        }
    }
    out
}

fn reorder_enforcement() -> Outcome {
    let started = Instant::now();
    let pair = output_trace(&[1, 2]);
    let expected: Vec<Action> = pair.actions().cloned().collect();
    let log = replay_in_order(&pair, &[1, 0])?;
    ensure(log == expected, || format!("two-step grant log {log:?}"))?;

    let five = output_trace(&[1, 2, 3, 4, 5]);
    let expected: Vec<Action> = five.actions().cloned().collect();
    let orders = permutations(5);
    for order in &orders {
        let log = replay_in_order(&five, order)?;
        ensure(log == expected, || format!("arrival order {order:?} granted {log:?}"))?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < REORDER_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!("reversed two-step arrival and {} permutations, {elapsed:.2?}", orders.len()))
}

// 4: timeout on an action absent from the trace

fn timeout_inconsistency() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let g = write_diamond(dir.path());
    let t = dir.path().join("t.jsonl");
    ensure(run(&["tracegen", "--graph", path(&g), "--out", path(&t)]).0 == 0, || "tracegen failed".into())?;

    let mut player = spawn_player(&t, 0, PLAYER_TIMEOUT.as_millis() as u64);
    let anchor = anchor_init(AnchorConfig::enabled(player.addr.clone(), NodeId(1))).map_err(|e| e.to_string())?;
    let sent = Instant::now();
    let err = anchor.input("Absent", Some(CanonValue::Null), None).expect_err("absent action must fail");
    let AnchorError::ReplayFail { reason, expected_action, .. } = err else {
        return Err(format!("expected a replay failure, got {err}"));
    };
    ensure(reason == FailReason::Timeout, || format!("reason {reason}"))?;
    let expected = expected_action.ok_or("expected_action missing")?;
    ensure(expected.name == "Step0", || format!("expected_action {expected}"))?;
    let status = player.child.wait().map_err(|e| e.to_string())?;
    let elapsed = sent.elapsed();
    let mut out = String::new();
    player.stdout.read_to_string(&mut out).ok();
    ensure(status.code() == Some(1), || format!("player exit {status}"))?;
    ensure(elapsed < PLAYER_TIMEOUT + TIMEOUT_SLACK, || format!("player exited after {elapsed:?}"))?;
    Ok(format!("Fail{{timeout}} expecting {expected}, exit 1 after {elapsed:.2?}"))
}

// 5 and 6: election refinement and bug detection

fn election_traces(nodes: u64, max_term: i64) -> Result<(usize, TraceSet), String> {
    let model = ElectionModel::new(ElectionParams { node_count: nodes, max_term }).map_err(|e| e.to_string())?;
    let result = explore(&model, ExploreBounds::default()).map_err(|e| e.to_string())?;
    ensure(!result.truncated, || "exploration truncated".into())?;
    let set = enumerate_traces(&result.graph, TraceGenLimits::default()).map_err(|e| e.to_string())?;
    Ok((result.violations.len(), set))
}

fn suite_options(inject_bug: bool) -> SuiteOptions {
    SuiteOptions { node_count: 3, max_term: 1, step_timeout: REPLAY_STEP_TIMEOUT, inject_bug, ..Default::default() }
}

fn refinement() -> Outcome {
    let started = Instant::now();
    let (violations, set) = election_traces(3, 1)?;
    ensure(violations == 0, || format!("{violations} invariant violations"))?;
    let report = run_traces(&set, &suite_options(false)).map_err(|e| e.to_string())?;
    let failed = report.failures().count();
    ensure(failed == 0, || {
        let f = report.first_failure().unwrap();
        format!("{failed} of {} traces failed; first: trace {} {:?}", report.runs.len(), f.trace_index, f.detail)
    })?;
    let elapsed = started.elapsed();
    ensure(elapsed < REFINEMENT_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "0 violations, {}/{} traces pass{}, {elapsed:.1?}",
        report.runs.len(),
        set.traces.len(),
        if set.truncated { " (trace set capped)" } else { "" }
    ))
}

fn bug_detection() -> Outcome {
    let model = ElectionModel::new(ElectionParams { node_count: 3, max_term: 1 }).unwrap().with_double_vote_bug();
    let violations = explore(&model, ExploreBounds::default()).map_err(|e| e.to_string())?.violations.len();
    ensure(violations > 0, || "buggy model has no violations".into())?;

    let (_, set) = election_traces(3, 1)?;
    let opts = suite_options(true);
    for (i, trace) in set.traces.iter().enumerate() {
        let report = run_trace(trace, i, &opts).map_err(|e| e.to_string())?;
        if !report.passed() {
            let reason = report.reason.ok_or("failure without reason")?;
            ensure(matches!(reason, FailReason::StateMismatch | FailReason::Timeout), || format!("reason {reason}"))?;
            return Ok(format!(
                "{violations} violating states; buggy nodes fail trace {i} at step {:?} ({reason})",
                report.failed_step
            ));
        }
    }
    Err(format!("buggy nodes passed all {} traces", set.traces.len()))
}

// 7: disabled anchors stay off the network

fn disabled_transparency() -> Outcome {
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().unwrap().to_string();
    listener.set_nonblocking(true).unwrap();
    let accepted = Arc::new(AtomicUsize::new(0));
    let stop = Arc::new(AtomicUsize::new(0));
    let counter = {
        let (accepted, stop) = (accepted.clone(), stop.clone());
        thread::spawn(move || {
            while stop.load(Ordering::SeqCst) == 0 {
                match listener.accept() {
                    Ok(_) => {
                        accepted.fetch_add(1, Ordering::SeqCst);
                    }
                    Err(_) => thread::sleep(Duration::from_millis(5)),
                }
            }
        })
    };
    let out = detrace()
        .args(["run-example", "--standalone", "--nodes", "3", "--seed", "1"])
        .env("DETRACE_ENABLED", "0")
        .env("DETRACE_PLAYER_ADDR", &addr)
        .output()
        .map_err(|e| e.to_string())?;
    thread::sleep(Duration::from_millis(50));
    stop.store(1, Ordering::SeqCst);
    counter.join().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure(out.status.success(), || format!("exit {}: {}", out.status, String::from_utf8_lossy(&out.stderr)))?;
    ensure(stdout.starts_with("leader: node "), || format!("output {stdout:?}"))?;
    let n = accepted.load(Ordering::SeqCst);
    ensure(n == 0, || format!("{n} connections to the player address"))?;
    Ok(format!("{}, 0 connections", stdout.trim()))
}

// 8: pipeline determinism

fn pipeline_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for k in 0..2 {
        let (g, t) = (dir.path().join(format!("graph{k}.jsonl")), dir.path().join(format!("traces{k}.jsonl")));
        let (code, _, err) =
            run(&["check-model", "--model", "election", "--nodes", "3", "--max-term", "1", "--out", path(&g)]);
        ensure(code == 0, || format!("check-model exit {code}: {err}"))?;
        let (code, _, err) = run(&["tracegen", "--graph", path(&g), "--out", path(&t)]);
        ensure(code == 0, || format!("tracegen exit {code}: {err}"))?;
        files.push((fs::read(&g).unwrap(), fs::read(&t).unwrap()));
    }
    ensure(files[0].0 == files[1].0, || "graph files differ".into())?;
    ensure(files[0].1 == files[1].1, || "trace files differ".into())?;
    Ok(format!("graph {} bytes, traces {} bytes, identical", files[0].0.len(), files[0].1.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("canonical encoding", canonical_encoding),
        ("trace enumeration matches brute force", trace_enumeration),
        ("reorder enforcement", reorder_enforcement),
        ("timeout on absent action", timeout_inconsistency),
        ("election refinement", refinement),
        ("bug detection", bug_detection),
        ("disabled anchors are inert", disabled_transparency),
        ("pipeline determinism", pipeline_determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {n}: {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n}: {name}: {detail}");
            }
        }
    }
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
