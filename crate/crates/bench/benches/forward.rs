use criterion::{criterion_group, criterion_main, Criterion};
use fnlp_core::domain::{generate_instance, Regime};
use fnlp_core::gnn::message_keys;
use fnlp_core::{GnnModel, Hyper, SceneConfig};

fn forward(c: &mut Criterion) {
    let g = generate_instance(Regime::Actions, 3, &SceneConfig::default())
        .unwrap()
        .graph;
    let model = GnnModel::new(Hyper::default(), &message_keys(&g), 1).unwrap();
    let labels = vec![1u8; g.num_variables()];
    let plan = model.plan(&g).unwrap();
    c.bench_function("gnn/forward", |b| b.iter(|| model.forward_planned(&plan)));
    c.bench_function("gnn/loss_and_gradient", |b| {
        let mut grad = vec![0.0; model.num_params()];
        b.iter(|| model.loss_grad_planned(&plan, &labels, 5.0, &mut grad))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = forward
}
criterion_main!(benches);
