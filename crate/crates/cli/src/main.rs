//! `detrace`: check a model, cut its graph into traces, and replay traces
//! against an implementation.
//!
//! Exit codes: 0 success, 1 a check or replay failed, 2 usage, IO or
//! configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use detrace_core::checker::{explore, ElectionModel, ElectionParams, ExploreBounds, DEFAULT_MAX_STATES};
use detrace_core::example::{self, ExampleError, SuiteOptions};
use detrace_core::player::{Player, RunReport};
use detrace_core::tracegen::{
    self, enumerate_traces_with_digest, file_digest, read_graph, read_traces, write_graph, write_graph_bytes,
    write_traces, TraceGenLimits,
};
use detrace_core::value::CanonValue;
use detrace_core::wire::DEFAULT_PLAYER_ADDR;

#[derive(Parser)]
#[command(name = "detrace", version, about = "Model-driven deterministic replay testing")]
struct Cli {
    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explore a builtin model and write its state graph.
    CheckModel(CheckModelArgs),
    /// Enumerate traces from a state graph.
    Tracegen(TracegenArgs),
    /// Serve one trace to anchored clients.
    Player(PlayerArgs),
    /// Replay traces against the example election system.
    RunExample(RunExampleArgs),
}

#[derive(Args)]
struct CheckModelArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    nodes: i64,
    #[arg(long)]
    max_term: i64,
    #[arg(long)]
    out: PathBuf,
    /// Explore the variant with the double-vote bug.
    #[arg(long)]
    buggy: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_STATES)]
    max_states: usize,
    #[arg(long)]
    max_depth: Option<usize>,
}

#[derive(Args)]
struct TracegenArgs {
    #[arg(long, required_unless_present = "graph_db")]
    graph: Option<PathBuf>,
    /// Read the graph from a SQLite dump instead of a graph file.
    #[arg(long, conflicts_with = "graph")]
    graph_db: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    max_depth: usize,
    #[arg(long, default_value_t = 10_000)]
    max_traces: usize,
    /// Keep traces with identical action sequences.
    #[arg(long)]
    no_dedup: bool,
}

#[derive(Args)]
struct PlayerArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    trace_index: usize,
    #[arg(long, default_value = DEFAULT_PLAYER_ADDR)]
    listen: String,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RunExampleArgs {
    #[arg(long, required_unless_present_any = ["fresh", "standalone"])]
    graph: Option<PathBuf>,
    #[arg(long, required_unless_present_any = ["fresh", "standalone"])]
    traces: Option<PathBuf>,
    /// Regenerate graph and traces first (written to --graph/--traces when given).
    #[arg(long)]
    fresh: bool,
    #[arg(long, default_value_t = 3)]
    nodes: u64,
    #[arg(long, default_value_t = 1)]
    max_term: i64,
    /// Replay against the implementation with the double-vote bug.
    #[arg(long)]
    inject_bug: bool,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
    /// Player address for each trace; port 0 picks a fresh port.
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Write one run report per line.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Run one free election with anchors configured from DETRACE_* variables.
    #[arg(long, conflicts_with_all = ["graph", "traces", "fresh", "inject_bug"])]
    standalone: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl ToString) -> Self {
        Failure { code: 2, msg: msg.to_string() }
    }
}

type CmdResult = Result<u8, Failure>;

fn timeout(ms: u64) -> Result<Duration, Failure> {
    if ms == 0 {
        return Err(Failure::usage("--timeout-ms must be positive"));
    }
    Ok(Duration::from_millis(ms))
}

fn check_model(args: CheckModelArgs) -> CmdResult {
    if args.model != "election" {
        return Err(Failure::usage(format!("unknown model {:?}; available: election", args.model)));
    }
    let params = CanonValue::map([("node_count", args.nodes.into()), ("max_term", args.max_term.into())]);
    let mut model = ElectionModel::new(ElectionParams::from_value(&params).map_err(Failure::usage)?)
        .map_err(Failure::usage)?;
    if args.buggy {
        model = model.with_double_vote_bug();
    }
    let bounds = ExploreBounds { max_states: args.max_states, max_depth: args.max_depth };
    let result = explore(&model, bounds).map_err(Failure::usage)?;
    write_graph(&result.graph, &args.out).map_err(Failure::usage)?;

    println!("states: {}", result.graph.state_count());
    println!("transitions: {}", result.graph.transitions().len());
    println!("truncated: {}", result.truncated);
    println!("violations: {}", result.violations.len());
    if let Some(v) = result.violations.first() {
        println!("counterexample for {} ({} steps):", v.invariant_name, v.path.len());
        for (i, (action, _)) in v.path.iter().enumerate() {
            println!("  {i}: {action}");
        }
        println!("  violating state: {}", v.state);
    }
    Ok(if result.violations.is_empty() { 0 } else { 1 })
}

fn tracegen(args: TracegenArgs) -> CmdResult {
    let (graph, digest) = match (&args.graph, &args.graph_db) {
        (Some(path), _) => read_graph(path).map_err(Failure::usage)?,
        (None, Some(db)) => {
            let graph = tracegen::import_sqlite(db, "imported").map_err(Failure::usage)?;
            let digest = file_digest(&write_graph_bytes(&graph));
            (graph, digest)
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let limits = TraceGenLimits { max_depth: args.max_depth, max_traces: args.max_traces, dedup: !args.no_dedup };
    let set = enumerate_traces_with_digest(&graph, limits, digest).map_err(Failure::usage)?;
    write_traces(&set, &args.out).map_err(Failure::usage)?;
    println!("traces: {}", set.traces.len());
    println!("truncated: {}", set.truncated);
    Ok(0)
}

fn print_report(report: &RunReport) {
    if report.passed() {
        println!("trace {}: pass ({} ms)", report.trace_index, report.elapsed_ms);
        return;
    }
    let reason = report.reason.map_or("unknown", |r| r.as_str());
    let step = report.failed_step.map_or("-".to_string(), |s| s.to_string());
    println!("trace {}: fail at step {step}: {reason}", report.trace_index);
    if let Some(a) = &report.expected_action {
        println!("  expected: {a}");
    }
    if let Some(d) = &report.detail {
        println!("  detail: {d}");
    }
}

fn player(args: PlayerArgs) -> CmdResult {
    let step_timeout = timeout(args.timeout_ms)?;
    let set = read_traces(&args.traces).map_err(Failure::usage)?;
    let count = set.traces.len();
    let trace = set.traces.into_iter().nth(args.trace_index).ok_or_else(|| {
        Failure::usage(format!("--trace-index {} out of range, file has {count} traces", args.trace_index))
    })?;
    let player = Player::bind(args.listen.as_str(), trace, args.trace_index, step_timeout).map_err(Failure::usage)?;
    println!("listening on {}", player.local_addr());
    let _ = std::io::stdout().flush();
    let report = player.run();
    print_report(&report);
    if let Some(path) = &args.report {
        report.write(path).map_err(Failure::usage)?;
    }
    Ok(if report.passed() { 0 } else { 1 })
}

fn regenerate(nodes: u64, max_term: i64, graph: &Path, traces: &Path) -> Result<(), Failure> {
    let params = ElectionParams { node_count: nodes, max_term };
    let model = ElectionModel::new(params).map_err(Failure::usage)?;
    let result = explore(&model, ExploreBounds::default()).map_err(Failure::usage)?;
    let digest = write_graph(&result.graph, graph).map_err(Failure::usage)?;
    let set = enumerate_traces_with_digest(&result.graph, TraceGenLimits::default(), digest).map_err(Failure::usage)?;
    write_traces(&set, traces).map_err(Failure::usage)?;
    println!("generated {} states, {} traces", result.graph.state_count(), set.traces.len());
    Ok(())
}

fn example_failure(e: ExampleError) -> Failure {
    match e {
        ExampleError::NoLeader(_) | ExampleError::Node(_) => Failure { code: 1, msg: e.to_string() },
        other => Failure::usage(other),
    }
}

fn run_example(args: RunExampleArgs) -> CmdResult {
    if args.standalone {
        let outcome = example::run_election(args.nodes, args.seed, timeout(args.timeout_ms)?).map_err(example_failure)?;
        println!("leader: node {} in term {}", outcome.leader, outcome.term);
        return Ok(0);
    }
    let scratch;
    let (graph, traces) = if args.fresh {
        scratch = tempfile::tempdir().map_err(Failure::usage)?;
        let graph = args.graph.unwrap_or_else(|| scratch.path().join("graph.jsonl"));
        let traces = args.traces.unwrap_or_else(|| scratch.path().join("traces.jsonl"));
        regenerate(args.nodes, args.max_term, &graph, &traces)?;
        (graph, traces)
    } else {
        (args.graph.expect("clap requires --graph"), args.traces.expect("clap requires --traces"))
    };
    let opts = SuiteOptions {
        node_count: args.nodes,
        max_term: args.max_term,
        step_timeout: timeout(args.timeout_ms)?,
        inject_bug: args.inject_bug,
        listen: args.listen,
    };
    let suite = example::run_suite(&graph, &traces, &opts).map_err(example_failure)?;
    for report in &suite.runs {
        print_report(report);
    }
    let failed = suite.failures().count();
    println!("passed {}/{} traces{}", suite.runs.len() - failed, suite.runs.len(), if suite.truncated {
        " (trace set truncated)"
    } else {
        ""
    });
    if let Some(first) = suite.first_failure() {
        println!("first failure: trace {} step {:?}", first.trace_index, first.failed_step);
    }
    if let Some(path) = &args.report {
        let mut out = Vec::new();
        for r in &suite.runs {
            out.extend(r.to_value().encode());
            out.push(b'\n');
        }
        fs::write(path, out).map_err(Failure::usage)?;
    }
    Ok(if suite.passed() { 0 } else { 1 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        2 => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(level).init();
    let result = match cli.command {
        Command::CheckModel(a) => check_model(a),
        Command::Tracegen(a) => tracegen(a),
        Command::Player(a) => player(a),
        Command::RunExample(a) => run_example(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
