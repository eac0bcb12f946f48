use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fnlp_core::conflicts::KnownConflictOracle;
use fnlp_core::{deletion_filter, quickxplain, FactoredNlp, VarClass};

/// A chain of `n` point variables with no constraints; feasibility is
/// decided by the planted oracle.
fn chain(n: usize) -> FactoredNlp {
    let mut g = FactoredNlp::new();
    for t in 0..n {
        g.add_variable(2, VarClass::ObjectRelative, t as u32, vec![0.0, 0.0, 0.0])
            .unwrap();
    }
    g
}

fn reducers(c: &mut Criterion) {
    let mut group = c.benchmark_group("reduce");
    for n in [20usize, 80, 320] {
        let g = chain(n);
        let oracle = KnownConflictOracle::new(vec![vec![1, n / 2, n - 2]]);
        group.bench_with_input(BenchmarkId::new("quickxplain", n), &n, |b, _| {
            b.iter(|| quickxplain(&g.full(), &oracle).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("deletion_filter", n), &n, |b, _| {
            b.iter(|| deletion_filter(&g.full(), &oracle).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, reducers);
criterion_main!(benches);
