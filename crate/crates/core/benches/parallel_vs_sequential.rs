use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use stein_core::energy::{sample_analytic, AnalyticTarget};
use stein_core::kernels::RbfKernel;
use stein_core::par::Exec;
use stein_core::svgd::{ksd_estimate_with, svgd_direction_with, BandwidthPolicy};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn svgd_direction(c: &mut Criterion) {
    let p = AnalyticTarget::standard_normal(8);
    let mut group = c.benchmark_group("svgd_direction");
    for n in [100, 400, 1000] {
        let ps = sample_analytic(&p, n, 1).unwrap();
        let kernel = RbfKernel::new(2.0).unwrap();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &ps, |b, ps| {
                b.iter(|| svgd_direction_with(black_box(ps), &p, &kernel, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn ksd(c: &mut Criterion) {
    let p = AnalyticTarget::standard_normal(8);
    let mut group = c.benchmark_group("ksd");
    for n in [100, 400, 1000] {
        let ps = sample_analytic(&p, n, 2).unwrap();
        let kernel = RbfKernel::new(2.0).unwrap();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &ps, |b, ps| {
                b.iter(|| ksd_estimate_with(black_box(ps), &p, &kernel, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn median_bandwidth(c: &mut Criterion) {
    let p = AnalyticTarget::standard_normal(8);
    let policy = BandwidthPolicy::Median { scale: 0.5 };
    let mut group = c.benchmark_group("median_bandwidth");
    for n in [400, 1000] {
        let ps = sample_analytic(&p, n, 3).unwrap();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &ps, |b, ps| {
                b.iter(|| policy.bandwidth(black_box(ps.positions()), exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, svgd_direction, ksd, median_bandwidth);
criterion_main!(benches);
