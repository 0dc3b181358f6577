mod common;

use std::fs;
use std::time::{Duration, Instant};

use common::{path, run, spawn_player, write_diamond};
use detrace_core::anchor::{anchor_init, AnchorConfig, AnchorError};
use detrace_core::model::NodeId;
use detrace_core::value::CanonValue;
use detrace_core::wire::FailReason;

#[test]
fn check_model_prints_counts() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.jsonl");
    let (code, out, _) = run(&["check-model", "--model", "election", "--nodes", "2", "--max-term", "1", "--out", path(&g)]);
    assert_eq!(code, 0);
    assert!(out.contains("states: 27\n"), "{out}");
    assert!(out.contains("transitions: 38\n"), "{out}");
    assert!(out.contains("violations: 0\n"), "{out}");
    assert!(g.exists());
}

#[test]
fn check_model_rejects_bad_params() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.jsonl");
    let (code, _, err) = run(&["check-model", "--model", "election", "--nodes", "1", "--max-term", "1", "--out", path(&g)]);
    assert_eq!(code, 2, "{err}");
    let (code, _, _) = run(&["check-model", "--model", "paxos", "--nodes", "2", "--max-term", "1", "--out", path(&g)]);
    assert_eq!(code, 2);
}

#[test]
fn buggy_model_exits_with_counterexample() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.jsonl");
    let (code, out, _) =
        run(&["check-model", "--model", "election", "--nodes", "2", "--max-term", "1", "--buggy", "--out", path(&g)]);
    assert_eq!(code, 1);
    assert!(out.contains("counterexample for AtMostOneLeaderPerTerm"), "{out}");
}

#[test]
fn tracegen_on_diamond() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_diamond(dir.path());
    let t = dir.path().join("t.jsonl");
    let (code, out, _) = run(&["tracegen", "--graph", path(&g), "--out", path(&t)]);
    assert_eq!(code, 0);
    assert_eq!(out, "traces: 2\ntruncated: false\n");
    let (code, out, _) = run(&["tracegen", "--graph", path(&g), "--out", path(&t), "--max-traces", "1"]);
    assert_eq!(code, 0);
    assert_eq!(out, "traces: 1\ntruncated: true\n");
}

#[test]
fn tracegen_missing_graph_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let t = dir.path().join("t.jsonl");
    let (code, _, err) = run(&["tracegen", "--graph", path(&missing), "--out", path(&t)]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn run_example_rejects_traces_from_another_graph() {
    let dir = tempfile::tempdir().unwrap();
    let (g1, g2, t) = (dir.path().join("g1"), dir.path().join("g2"), dir.path().join("t"));
    let check = |g: &std::path::Path, nodes: &str| {
        let (code, _, _) = run(&["check-model", "--model", "election", "--nodes", nodes, "--max-term", "1", "--out", path(g)]);
        assert_eq!(code, 0);
    };
    check(&g1, "2");
    check(&g2, "3");
    assert_eq!(run(&["tracegen", "--graph", path(&g1), "--out", path(&t)]).0, 0);
    let (code, _, err) = run(&["run-example", "--graph", path(&g2), "--traces", path(&t), "--nodes", "2"]);
    assert_eq!(code, 2);
    assert!(err.contains("not"), "{err}");
}

#[test]
fn run_example_two_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let (g, t, r) = (dir.path().join("g"), dir.path().join("t"), dir.path().join("r.jsonl"));
    let (code, out, _) = run(&[
        "run-example", "--fresh", "--graph", path(&g), "--traces", path(&t), "--nodes", "2", "--report", path(&r),
    ]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("passed 62/62 traces"), "{out}");
    assert_eq!(fs::read_to_string(&r).unwrap().lines().count(), 62);

    let (code, out, _) = run(&["run-example", "--graph", path(&g), "--traces", path(&t), "--nodes", "2", "--inject-bug"]);
    assert_eq!(code, 1);
    assert!(out.contains("state_mismatch"), "{out}");
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for k in 0..2 {
        let (g, t) = (dir.path().join(format!("g{k}")), dir.path().join(format!("t{k}")));
        assert_eq!(run(&["check-model", "--model", "election", "--nodes", "2", "--max-term", "2", "--out", path(&g)]).0, 0);
        assert_eq!(run(&["tracegen", "--graph", path(&g), "--out", path(&t)]).0, 0);
        outputs.push((fs::read(&g).unwrap(), fs::read(&t).unwrap()));
    }
    assert!(outputs[0] == outputs[1]);
}

#[test]
fn player_times_out_on_absent_action() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_diamond(dir.path());
    let t = dir.path().join("t.jsonl");
    assert_eq!(run(&["tracegen", "--graph", path(&g), "--out", path(&t)]).0, 0);

    let mut player = spawn_player(&t, 0, 300);
    let started = Instant::now();
    let anchor = anchor_init(AnchorConfig::enabled(player.addr.clone(), NodeId(1))).unwrap();
    let err = anchor.input("NotInTrace", Some(CanonValue::Null), None).unwrap_err();
    match err {
        AnchorError::ReplayFail { reason, expected_action, .. } => {
            assert_eq!(reason, FailReason::Timeout);
            assert_eq!(expected_action.unwrap().name, "Step0");
        }
        other => panic!("expected timeout, got {other}"),
    }
    let status = player.child.wait().unwrap();
    assert_eq!(status.code(), Some(1));
    assert!(started.elapsed() < Duration::from_millis(300) + Duration::from_secs(2));
}

#[test]
fn player_rejects_bad_index() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_diamond(dir.path());
    let t = dir.path().join("t.jsonl");
    assert_eq!(run(&["tracegen", "--graph", path(&g), "--out", path(&t)]).0, 0);
    let (code, _, err) = run(&["player", "--traces", path(&t), "--trace-index", "5", "--listen", "127.0.0.1:0"]);
    assert_eq!(code, 2);
    assert!(err.contains("out of range"), "{err}");
}

#[test]
fn standalone_election_elects_a_leader() {
    let (code, out, _) = detrace_env(&["run-example", "--standalone", "--nodes", "3", "--seed", "7"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("leader: node "), "{out}");
}

fn detrace_env(args: &[&str]) -> (i32, String, String) {
    let out = common::detrace().args(args).env("DETRACE_ENABLED", "0").output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into(), String::from_utf8_lossy(&out.stderr).into())
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(run(&["frobnicate"]).0, 2);
}
