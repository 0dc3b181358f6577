#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, ChildStdout, Command, Output, Stdio};

use detrace_core::model::{Action, State, StateGraph, Transition};
use detrace_core::tracegen::write_graph;
use detrace_core::value::CanonValue;

pub fn detrace() -> Command {
    Command::new(env!("CARGO_BIN_EXE_detrace"))
}

/// Runs the binary to completion and returns (exit code, stdout, stderr).
pub fn run(args: &[&str]) -> (i32, String, String) {
    let Output { status, stdout, stderr } = detrace().args(args).output().expect("run detrace");
    (
        status.code().expect("exited normally"),
        String::from_utf8_lossy(&stdout).into_owned(),
        String::from_utf8_lossy(&stderr).into_owned(),
    )
}

pub fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// A graph `s0 -> s1, s0 -> s2, s1 -> s3, s2 -> s3` with one action per edge.
pub fn diamond() -> StateGraph {
    let mut g = StateGraph::new("diamond");
    let ids: Vec<_> = (0..4i64)
        .map(|i| g.insert_state(State::new().with("x", i)).unwrap().0)
        .collect();
    g.mark_initial(ids[0]).unwrap();
    for (n, (a, b)) in [(0, 1), (0, 2), (1, 3), (2, 3)].into_iter().enumerate() {
        let action = Action::internal(&format!("Step{n}"), 1, CanonValue::Null);
        g.add_transition(Transition { from: ids[a], action, to: ids[b] }).unwrap();
    }
    g
}

pub fn write_diamond(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("diamond.jsonl");
    write_graph(&diamond(), &p).unwrap();
    p
}

/// A player subprocess and the address it announced.
pub struct PlayerProc {
    pub child: Child,
    pub addr: String,
    pub stdout: BufReader<ChildStdout>,
}

pub fn spawn_player(traces: &Path, index: usize, timeout_ms: u64) -> PlayerProc {
    let mut child = detrace()
        .args(["player", "--traces", path(traces), "--trace-index", &index.to_string()])
        .args(["--listen", "127.0.0.1:0", "--timeout-ms", &timeout_ms.to_string()])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .expect("spawn player");
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    stdout.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected banner {line:?}"));
    PlayerProc { addr: addr.to_string(), child, stdout }
}
