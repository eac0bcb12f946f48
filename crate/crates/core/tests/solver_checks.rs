mod common;

use fnlp_core::domain::{planted_instance, Pattern};
use fnlp_core::solver::{assignment_violation, jacobian, residual};
use fnlp_core::{brute_force_conflicts, Solver, SolverConfig};
use rand::Rng;

/// Largest entry-wise error between the analytic Jacobian and central
/// differences, relative to `max(|a|, |fd|, 1)`.
fn jacobian_error(c: &fnlp_core::ConstraintNode, values: &[Vec<f64>]) -> f64 {
    let refs: Vec<&[f64]> = values.iter().map(|v| v.as_slice()).collect();
    let j = jacobian(c, &refs).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut col = 0;
    for (k, v) in values.iter().enumerate() {
        for d in 0..v.len() {
            let mut plus = values.to_vec();
            let mut minus = values.to_vec();
            plus[k][d] += h;
            minus[k][d] -= h;
            let rp = residual(c, &plus.iter().map(|v| v.as_slice()).collect::<Vec<_>>()).unwrap();
            let rm = residual(c, &minus.iter().map(|v| v.as_slice()).collect::<Vec<_>>()).unwrap();
            for row in 0..j.rows {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                let a = j.get(row, col);
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1.0));
            }
            col += 1;
        }
    }
    worst
}

#[test]
fn analytic_jacobians_match_central_differences() {
    let mut r = common::rng(11);
    let mut probes = 0;
    let mut worst: f64 = 0.0;
    let mut seen = std::collections::BTreeSet::new();
    while probes < 1000 {
        let g = common::random_graph(r.random(), 4, 1);
        let c = g.constraint(0);
        seen.insert(c.kind);
        let values: Vec<Vec<f64>> = c
            .scope
            .iter()
            .map(|&v| {
                (0..g.variable(v).dim)
                    .map(|_| r.random_range(-1.5..1.5))
                    .collect()
            })
            .collect();
        worst = worst.max(jacobian_error(c, &values));
        probes += 1;
    }
    assert_eq!(seen.len(), fnlp_core::ConstraintKind::ALL.len());
    assert!(worst <= 1e-5, "worst relative error {worst:e}");
}

#[test]
fn feasible_outcomes_satisfy_the_tolerance() {
    let solver = Solver::new(SolverConfig::default());
    let tol = solver.config().feas_tol;
    let mut feasible = 0;
    for seed in 0..60u64 {
        let g = common::random_graph(seed, 6, 5);
        let out = solver.solve_graph(&g).unwrap();
        if out.feasible {
            feasible += 1;
            let a = out.assignment.as_ref().unwrap();
            let v = assignment_violation(&g.full(), a).unwrap();
            assert!(v <= tol && out.max_violation <= tol, "seed {seed}: {v:e}");
        }
    }
    assert!(feasible > 10);
}

#[test]
fn brute_force_confirms_planted_conflicts() {
    let solver = Solver::new(SolverConfig::default());
    for seed in 0..12u64 {
        let pattern = Pattern::ALL[seed as usize % 3];
        let p = planted_instance(&[pattern], 10, seed).unwrap();
        let found = brute_force_conflicts(&p.graph.full(), &solver).unwrap();
        let vars: Vec<Vec<usize>> = found.into_iter().map(|c| c.variables).collect();
        assert_eq!(vars, p.conflicts, "seed {seed} {pattern:?}");
    }
}
