use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use evisurro_bench::{net, score_rows, table, upstream, GRID};
use evisurro_core::evidential::{loss_gradients, raw_interval};
use evisurro_core::special::student_t_quantile;
use evisurro_core::{CalibrationOptions, CalibrationTable, EvidentialParams, LossWeights, MiscoverageLevel};

fn special(c: &mut Criterion) {
    let mut g = c.benchmark_group("student_t_quantile");
    for df in [2.5, 10.0, 200.0] {
        g.bench_with_input(BenchmarkId::from_parameter(df), &df, |b, &df| {
            b.iter(|| student_t_quantile(black_box(df), black_box(0.975)).unwrap())
        });
    }
    g.finish();

    let m = EvidentialParams::new(0.1, 2.0, 3.0, 0.5).unwrap();
    c.bench_function("raw_interval", |b| b.iter(|| raw_interval(black_box(&m), 0.1).unwrap()));
    let w = LossWeights::default();
    c.bench_function("loss_gradients", |b| {
        b.iter(|| loss_gradients(black_box(&m), black_box(0.3), &w))
    });
}

fn network(c: &mut Criterion) {
    let x = [0.2, 0.5, 0.8];
    let up = upstream(GRID.iter().product());
    let mut g = c.benchmark_group("network_32x32");
    for hidden in [32, 64] {
        let n = net(hidden);
        g.bench_with_input(BenchmarkId::new("forward", hidden), &n, |b, n| {
            b.iter(|| n.forward(black_box(&x)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("backward", hidden), &n, |b, n| {
            b.iter(|| n.backward(black_box(&x), &up).unwrap())
        });
    }
    g.finish();
}

fn calibration(c: &mut Criterion) {
    let n: usize = GRID.iter().product();
    let lo = score_rows(200, n, 2);
    let hi = score_rows(200, n, 3);
    c.bench_function("table_build_200x1024", |b| {
        b.iter(|| {
            CalibrationTable::from_member_scores(
                GRID.to_vec(),
                0.1,
                CalibrationOptions::default(),
                (0..200).collect(),
                black_box(&lo),
                black_box(&hi),
            )
            .unwrap()
        })
    });
    let level = MiscoverageLevel::new(0.1).unwrap();
    for pooled in [false, true] {
        let t = table(200, pooled);
        let name = if pooled {
            "quantiles_pooled"
        } else {
            "quantiles_per_element"
        };
        c.bench_function(name, |b| b.iter(|| t.quantiles(black_box(level))));
    }
}

criterion_group!(benches, special, network, calibration);
criterion_main!(benches);
