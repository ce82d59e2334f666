use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use featborrow::anchors::{coverage_report, AnchorSpec, CoverageMode, Range};
use featborrow::autograd::backward;
use featborrow::fmb::matching_matrix;
use featborrow::forward_pyramid;
use featborrow_bench::{fixture, SMALL, SSD_LIKE};

fn matching(c: &mut Criterion) {
    let (p, params, _) = fixture(&SSD_LIKE, 1);
    c.bench_function("matching_matrix/conv4_3", |b| {
        b.iter(|| matching_matrix(black_box(&p), &params.layers[0].fmb).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_pyramid");
    for (name, shapes) in [("small", &SMALL[..]), ("ssd_like", &SSD_LIKE[..])] {
        let (p, params, _) = fixture(shapes, 2);
        group.bench_with_input(BenchmarkId::from_parameter(name), &p, |b, p| {
            b.iter(|| forward_pyramid(black_box(p), &params).unwrap())
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let (p, params, target) = fixture(&SMALL, 3);
    c.bench_function("backward/small", |b| {
        b.iter(|| backward(black_box(&p), &params, &target).unwrap())
    });
}

fn coverage(c: &mut Criterion) {
    let spec = AnchorSpec::reference();
    let mut group = c.benchmark_group("coverage_joint_10k");
    for threads in [1, 4] {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &t| {
            b.iter(|| {
                coverage_report(
                    &spec,
                    CoverageMode::Joint,
                    Range::new(1.0 / 6.0, 6.0),
                    Range::new(32.0, 300.0),
                    0.5,
                    10_000,
                    0,
                    t,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matching, forward, gradients, coverage);
criterion_main!(benches);
