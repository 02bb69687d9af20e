use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use esreg::tuning::{compute_path, cv_select, Stage};
use esreg::{CvConfig, SolverConfig};
use esreg_bench::problem;

fn bench_cv(c: &mut Criterion) {
    let mut g = c.benchmark_group("cv_select");
    g.sample_size(10);
    for (n, p) in [(300, 50), (800, 200)] {
        let (sc, ds) = problem(n, p, 3);
        let cv = CvConfig::default();
        let cfg = SolverConfig::default();
        g.bench_with_input(BenchmarkId::new("quantile", format!("{n}x{p}")), &ds, |b, ds| {
            b.iter(|| cv_select(ds, &Stage::Quantile, sc.level(), &cv, &cfg).unwrap())
        });
    }
    g.finish();
}

fn bench_hbic_path(c: &mut Criterion) {
    let mut g = c.benchmark_group("full_path");
    g.sample_size(10);
    let (sc, ds) = problem(800, 200, 4);
    let cfg = SolverConfig::default();
    g.bench_function("quantile_800x200", |b| {
        b.iter(|| compute_path(&ds, &Stage::Quantile, sc.level(), 50, 0.01, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_cv, bench_hbic_path);
criterion_main!(benches);
