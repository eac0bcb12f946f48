#![allow(dead_code)]

use fnlp_core::{ConstraintKind, FactoredNlp, Frame, VarClass, VarId};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    fnlp_core::seed::rng(seed)
}

pub fn random_var(g: &mut FactoredNlp, rng: &mut ChaCha8Rng) -> VarId {
    let class = *VarClass::ALL.choose(rng).unwrap();
    let geometry = (0..class.geometry_arity())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    g.add_variable(2, class, rng.random_range(0..6), geometry)
        .unwrap()
}

fn distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<VarId> {
    let mut out: Vec<VarId> = Vec::new();
    while out.len() < k {
        let v = rng.random_range(0..n);
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

fn arm(rng: &mut ChaCha8Rng) -> Frame {
    Frame::Arm {
        base: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        reach: rng.random_range(0.3..0.8),
    }
}

/// Adds one random constraint over existing variables; all variables must
/// be planar and there must be at least three of them.
pub fn random_constraint(g: &mut FactoredNlp, rng: &mut ChaCha8Rng) {
    use ConstraintKind::*;
    let n = g.num_variables();
    let pick: u32 = rng.random_range(0..10);
    let (kind, scope, params): (ConstraintKind, Vec<VarId>, Vec<f64>) = match pick {
        0 => (
            Ref,
            distinct(rng, n, 1),
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        ),
        1 => (Equal, distinct(rng, n, 2), vec![]),
        2 => (
            PoseDiff,
            distinct(rng, n, 2),
            Frame::World.encode().to_vec(),
        ),
        3 => (PoseDiff, distinct(rng, n, 3), arm(rng).encode().to_vec()),
        4 => {
            let mut p = Frame::World.encode().to_vec();
            p.extend(arm(rng).encode());
            (Kin, distinct(rng, n, 3), p)
        }
        5 => {
            let mut p = arm(rng).encode().to_vec();
            p.extend(Frame::Point.encode());
            (Kin, distinct(rng, n, 4), p)
        }
        6 => (Grasp, distinct(rng, n, 1), vec![]),
        7 => {
            let (x, y) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            (Pos, distinct(rng, n, 1), vec![x, y, x + 0.2, y + 0.1])
        }
        8 => (
            Collision,
            distinct(rng, n, 2),
            vec![rng.random_range(0.0..0.2), rng.random_range(0.0..0.2), 0.01],
        ),
        _ => {
            let mut p: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            p.push(rng.random_range(-0.5..0.5));
            (LinearIneq, distinct(rng, n, 2), p)
        }
    };
    g.add_constraint(kind, scope, params).unwrap();
}

pub fn random_graph(seed: u64, n_vars: usize, n_cons: usize) -> FactoredNlp {
    let mut r = rng(seed);
    let mut g = FactoredNlp::new();
    for _ in 0..n_vars.max(4) {
        random_var(&mut g, &mut r);
    }
    for _ in 0..n_cons {
        random_constraint(&mut g, &mut r);
    }
    g
}

/// The same graph with variable `i` renamed to `perm[i]`; constraint order
/// and scope order are kept.
pub fn relabel(g: &FactoredNlp, perm: &[VarId]) -> FactoredNlp {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let mut out = FactoredNlp::new();
    for &old in &inv {
        let v = g.variable(old);
        out.add_variable(v.dim, v.class, v.time, v.geometry.clone())
            .unwrap();
    }
    for c in g.constraints() {
        let scope = c.scope.iter().map(|&v| perm[v]).collect();
        out.add_constraint(c.kind, scope, c.params.clone()).unwrap();
    }
    out
}

pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
