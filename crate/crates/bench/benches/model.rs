use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use slotmixer_bench::{bench_config, params, random_tensor};
use slotmixer_core::trainer::{train_step, AdamState};
use slotmixer_core::{Rng, Tape};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128, 256] {
        let a = random_tensor(&[n, n], 1);
        let b = random_tensor(&[n, n], 2);
        group.throughput(Throughput::Elements((n * n * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
                tape.matmul(x, y).unwrap()
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("predict");
    for lookback in [96, 192, 336] {
        let cfg = bench_config(lookback);
        let p = params(&cfg);
        let x = random_tensor(&[32, lookback, cfg.channels], 3);
        group.bench_with_input(BenchmarkId::from_parameter(lookback), &lookback, |bench, _| {
            bench.iter(|| p.predict(&x).unwrap())
        });
    }
    group.finish();
}

fn step(c: &mut Criterion) {
    let cfg = bench_config(96);
    let mut p = params(&cfg);
    let mut state = AdamState::for_model(&p);
    let x = random_tensor(&[32, 96, cfg.channels], 4);
    let y = random_tensor(&[32, cfg.horizon, cfg.channels], 5);
    let mut rng = Rng::seed_from(0);
    c.bench_function("train_step/96", |bench| {
        bench.iter(|| train_step(&mut p, &mut state, &x, &y, 1e-3, &mut rng).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = matmul, forward, step
}
criterion_main!(benches);
