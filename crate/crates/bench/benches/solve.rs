use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fnlp_core::domain::{generate_instance, Regime};
use fnlp_core::{SceneConfig, Solver, SolverConfig};

fn solve_full_graphs(c: &mut Criterion) {
    let cfg = SceneConfig::default();
    let graphs: Vec<_> = (0..8)
        .filter_map(|s| generate_instance(Regime::Train, s, &cfg).ok())
        .map(|g| g.graph)
        .collect();
    let solver = Solver::new(SolverConfig::default());
    c.bench_function("solve/train_full_graph", |b| {
        b.iter_batched(
            || graphs.clone(),
            |gs| {
                for g in &gs {
                    std::hint::black_box(solver.solve_graph(g).unwrap().feasible);
                }
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = solve_full_graphs
}
criterion_main!(benches);
