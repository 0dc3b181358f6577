use std::time::{Duration, Instant};

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use detrace_bench::{election, election_graph, output_trace, request, sample_value};
use detrace_core::checker::{explore, ExploreBounds};
use detrace_core::player::Cursor;
use detrace_core::tracegen::{enumerate_traces, TraceGenLimits};
use detrace_core::value::{canon_decode, canon_encode};

fn canon(c: &mut Criterion) {
    let v = sample_value(16);
    let bytes = canon_encode(&v);
    c.bench_function("canon_encode", |b| b.iter(|| canon_encode(black_box(&v))));
    c.bench_function("canon_decode", |b| b.iter(|| canon_decode(black_box(&bytes)).unwrap()));
}

fn checker(c: &mut Criterion) {
    let model = election(2, 2);
    c.bench_function("explore election 2x2", |b| {
        b.iter(|| explore(black_box(&model), ExploreBounds::default()).unwrap())
    });
}

fn tracegen(c: &mut Criterion) {
    let graph = election_graph(2, 1);
    c.bench_function("enumerate traces election 2x1", |b| {
        b.iter(|| enumerate_traces(black_box(&graph), TraceGenLimits::default()).unwrap())
    });
}

fn cursor(c: &mut Criterion) {
    let trace = output_trace(64);
    let reqs: Vec<_> = trace.actions().map(request).collect();
    // worst case for parking: every request arrives in reverse order
    c.bench_function("cursor reverse arrival 64", |b| {
        b.iter_batched(
            || Cursor::new(trace.clone(), Duration::from_secs(10), Instant::now()),
            |mut cur| {
                let now = Instant::now();
                for (t, r) in reqs.iter().enumerate().rev() {
                    black_box(cur.submit(t as u64, r.clone(), now));
                }
                cur
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, canon, checker, tracegen, cursor);
criterion_main!(benches);
