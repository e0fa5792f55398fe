//! Rayon pool against the sequential path on the two hot loops: simulating a
//! period of user sessions and the user-cluster bootstrap.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use slatelab::ope::bootstrap_se;
use slatelab::policy::PolicySpec;
use slatelab::sim::{make_world, simulate_period, PolicyAssignment, WorldConfig};
use slatelab::{par, seed};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn simulate(c: &mut Criterion) {
    let world = make_world(&WorldConfig::default()).unwrap();
    let everyone = PolicyAssignment::everyone(PolicySpec::editorial(world.script.clone()));
    let mut g = c.benchmark_group("simulate_period_14d");
    g.sample_size(10);
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::force_sequential(seq);
            b.iter(|| simulate_period(&world, &everyone, 0..14, 3).unwrap());
        });
    }
    par::force_sequential(false);
    g.finish();
}

fn bootstrap(c: &mut Criterion) {
    let mut rng = seed::rng(1);
    let per_user: Vec<(f64, usize)> = (0..2000)
        .map(|_| {
            let n = rng.random_range(1..40);
            (rng.random_range(0.0..1.0) * n as f64, n)
        })
        .collect();
    let mut g = c.benchmark_group("bootstrap_se_500");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::force_sequential(seq);
            b.iter(|| bootstrap_se(&per_user, 500, 9));
        });
    }
    par::force_sequential(false);
    g.finish();
}

criterion_group!(benches, simulate, bootstrap);
criterion_main!(benches);
