mod common;

use fnlp_core::gnn::{grad_check, message_keys};
use fnlp_core::{FactoredNlp, GnnModel, Hyper};
use rand::Rng;

fn small() -> Hyper {
    Hyper {
        n_z: 8,
        n_mu: 6,
        hidden: 10,
        rounds: 2,
        ..Hyper::default()
    }
}

#[test]
fn forward_is_equivariant_under_relabeling() {
    for seed in 0..50u64 {
        let g = common::random_graph(seed, 5 + (seed % 9) as usize, 14);
        let model = GnnModel::new(small(), &message_keys(&g), seed).unwrap();
        let mut r = common::rng(seed + 1000);
        let perm = common::permutation(&mut r, g.num_variables());
        let h = common::relabel(&g, &perm);
        let a = model.forward(&g).unwrap();
        let b = model.forward(&h).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(a[i].to_bits(), b[p].to_bits(), "seed {seed} var {i}");
        }
    }
}

#[test]
fn isolated_variables_only_see_themselves() {
    for seed in 0..50u64 {
        let mut g = common::random_graph(seed, 8, 12);
        let base = GnnModel::new(small(), &message_keys(&g), seed).unwrap();
        let before = base.forward(&g).unwrap();
        let mut r = common::rng(seed + 7);
        let v = common::random_var(&mut g, &mut r);
        if r.random_bool(0.5) {
            g.add_constraint(fnlp_core::ConstraintKind::Ref, vec![v], vec![0.3, -0.2])
                .unwrap();
        }
        let after = base.forward(&g).unwrap();
        assert_eq!(&after[..v], before.as_slice(), "seed {seed}");

        let mut alone = FactoredNlp::new();
        let node = g.variable(v);
        alone
            .add_variable(node.dim, node.class, node.time, node.geometry.clone())
            .unwrap();
        for c in g.constraints().iter().filter(|c| c.scope == [v]) {
            alone
                .add_constraint(c.kind, vec![0], c.params.clone())
                .unwrap();
        }
        assert_eq!(
            base.forward(&alone).unwrap()[0].to_bits(),
            after[v].to_bits(),
            "seed {seed}"
        );
    }
}

#[test]
fn reverse_mode_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let g = common::random_graph(seed, 4 + (seed % 5) as usize, 8);
        let hyper = Hyper {
            rounds: 1 + (seed % 3) as usize,
            ..small()
        };
        let model = GnnModel::new(hyper, &message_keys(&g), seed).unwrap();
        let mut r = common::rng(seed);
        let labels: Vec<u8> = (0..g.num_variables())
            .map(|_| r.random_range(0..2))
            .collect();
        worst = worst.max(grad_check(&model, &g, &labels, 3.0, 60, seed).unwrap());
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn keyframe_index_is_ignored() {
    let g = common::random_graph(3, 8, 12);
    let mut shifted = FactoredNlp::new();
    for v in g.variables() {
        shifted
            .add_variable(v.dim, v.class, v.time + 40, v.geometry.clone())
            .unwrap();
    }
    for c in g.constraints() {
        shifted
            .add_constraint(c.kind, c.scope.clone(), c.params.clone())
            .unwrap();
    }
    let model = GnnModel::new(small(), &message_keys(&g), 1).unwrap();
    assert_eq!(model.forward(&g).unwrap(), model.forward(&shifted).unwrap());
}
