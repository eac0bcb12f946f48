//! Constraint residuals, analytic Jacobians, and the feasibility routine.
//!
//! Feasibility of a (sub)graph is decided by minimizing constraint violation
//! with an augmented Lagrangian whose subproblems are solved by damped
//! Gauss-Newton steps. The normal equations are factored with a skyline
//! Cholesky: variable ids of compiled graphs are ordered keyframe by
//! keyframe, so the envelope stays narrow.
//!
//! The procedure is incomplete: "infeasible" means every seeded restart
//! stalled above the tolerance.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, FRAME_PARAMS};
use crate::graph::{
    is_sorted_subset, ConId, ConstraintKind, ConstraintNode, FactoredNlp, Subgraph, VarId,
};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("constraint {constraint} produced a non-finite residual")]
    NonFinite { constraint: ConId },
    #[error("constraint {constraint}: {reason}")]
    Dimension { constraint: ConId, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub feas_tol: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub restarts: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub rng_seed: u64,
    /// Standard deviation of the first attempt's initial perturbation, in
    /// scene units.
    pub init_noise: f64,
    /// Each further attempt multiplies the perturbation by this factor.
    pub noise_growth: f64,
    pub max_init_noise: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            feas_tol: 1e-4,
            max_outer_iters: 20,
            max_inner_iters: 30,
            restarts: 10,
            penalty_init: 1.0,
            penalty_growth: 10.0,
            rng_seed: 0,
            init_noise: 0.1,
            noise_growth: 2.0,
            max_init_noise: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.feas_tol > 0.0) {
            return Err("feas_tol must be positive".into());
        }
        if !(self.penalty_growth > 1.0) {
            return Err("penalty_growth must exceed 1".into());
        }
        if !(self.penalty_init > 0.0) {
            return Err("penalty_init must be positive".into());
        }
        if self.restarts == 0 {
            return Err("restarts must be at least 1".into());
        }
        if !(self.init_noise >= 0.0 && self.noise_growth >= 1.0 && self.max_init_noise >= 0.0) {
            return Err(
                "init_noise and max_init_noise must be nonnegative, noise_growth at least 1".into(),
            );
        }
        Ok(())
    }
}

/// Values for every variable of a solved (sub)graph.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    pub values: BTreeMap<VarId, Vec<f64>>,
}

impl Assignment {
    pub fn get(&self, var: VarId) -> Option<&[f64]> {
        self.values.get(&var).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub feasible: bool,
    /// Present iff `feasible`.
    pub assignment: Option<Assignment>,
    /// Best violation reached (of the first infeasible component, when infeasible).
    pub max_violation: f64,
    pub restarts_used: usize,
    pub iterations: usize,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

fn dim_err(con: &ConstraintNode, reason: impl Into<String>) -> SolverError {
    SolverError::Dimension {
        constraint: con.id,
        reason: reason.into(),
    }
}

fn check_values(con: &ConstraintNode, values: &[&[f64]]) -> Result<(), SolverError> {
    use ConstraintKind::*;
    if values.len() != con.scope.len() {
        return Err(dim_err(
            con,
            format!("expected {} values, got {}", con.scope.len(), values.len()),
        ));
    }
    let ok = match con.kind {
        Ref => values[0].len() == con.params.len(),
        Equal => values.iter().all(|v| v.len() == con.residual_dim),
        LinearIneq => values.iter().map(|v| v.len()).sum::<usize>() + 1 == con.params.len(),
        PoseDiff | Kin | Grasp | Pos | Collision => values.iter().all(|v| v.len() == 2),
    };
    if ok {
        Ok(())
    } else {
        Err(dim_err(con, "value dimensions do not match the scope"))
    }
}

/// `h_a(x_a)`. Equality kinds return signed residuals; inequality kinds
/// return values that are `<= 0` when satisfied.
pub fn residual(con: &ConstraintNode, values: &[&[f64]]) -> Result<Vec<f64>, SolverError> {
    check_values(con, values)?;
    let mut r = vec![0.0; con.residual_dim];
    eval_constraint(con, values, &mut r, None);
    Ok(r)
}

/// Analytic Jacobian, `residual_dim x (sum of scope dims)`.
///
/// At coincident collision centres the subgradient direction is the first axis.
pub fn jacobian(con: &ConstraintNode, values: &[&[f64]]) -> Result<Matrix, SolverError> {
    check_values(con, values)?;
    let cols: usize = values.iter().map(|v| v.len()).sum();
    let mut r = vec![0.0; con.residual_dim];
    let mut data = vec![0.0; con.residual_dim * cols];
    eval_constraint(con, values, &mut r, Some(&mut data));
    Ok(Matrix {
        rows: con.residual_dim,
        cols,
        data,
    })
}

/// Violation of one residual vector: `|h|` for equalities, `max(0, g)` otherwise.
pub fn violation(con: &ConstraintNode, residual: &[f64]) -> f64 {
    residual.iter().fold(0.0f64, |m, &r| {
        let v = if con.is_equality { r.abs() } else { r.max(0.0) };
        m.max(v)
    })
}

/// Row-major jacobian writer over the concatenated scope columns.
struct JacWriter<'a> {
    data: &'a mut [f64],
    cols: usize,
}

impl JacWriter<'_> {
    fn add_block(&mut self, row: usize, col: usize, block: &[[f64; 2]; 2], scale: f64) {
        for (r, brow) in block.iter().enumerate() {
            for (c, &b) in brow.iter().enumerate() {
                self.data[(row + r) * self.cols + col + c] += scale * b;
            }
        }
    }

    fn add_identity(&mut self, row: usize, col: usize, scale: f64) {
        self.add_block(row, col, &[[1.0, 0.0], [0.0, 1.0]], scale);
    }

    fn add_row(&mut self, row: usize, col: usize, vals: [f64; 2]) {
        self.data[row * self.cols + col] += vals[0];
        self.data[row * self.cols + col + 1] += vals[1];
    }
}

fn frame_at(params: &[f64], k: usize) -> Frame {
    Frame::decode(&params[k * FRAME_PARAMS..(k + 1) * FRAME_PARAMS]).expect("validated frame")
}

/// Evaluates the residual and optionally the Jacobian (which must be zeroed).
fn eval_constraint(
    con: &ConstraintNode,
    values: &[&[f64]],
    res: &mut [f64],
    jac: Option<&mut [f64]>,
) {
    use ConstraintKind::*;
    let cols: usize = values.iter().map(|v| v.len()).sum();
    let mut jac = jac.map(|data| JacWriter { data, cols });
    match con.kind {
        Ref => {
            for (i, (x, t)) in values[0].iter().zip(&con.params).enumerate() {
                res[i] = x - t;
                if let Some(j) = jac.as_mut() {
                    j.data[i * cols + i] = 1.0;
                }
            }
        }
        Equal => {
            let d = con.residual_dim;
            for i in 0..d {
                res[i] = values[0][i] - values[1][i];
                if let Some(j) = jac.as_mut() {
                    j.data[i * cols + i] = 1.0;
                    j.data[i * cols + d + i] = -1.0;
                }
            }
        }
        Grasp => {
            res[0] = values[0][0];
            res[1] = values[0][1];
            if let Some(j) = jac.as_mut() {
                j.add_identity(0, 0, 1.0);
            }
        }
        Pos => {
            let (x, y) = (values[0][0], values[0][1]);
            let p = &con.params;
            res[0] = p[0] - x;
            res[1] = p[1] - y;
            res[2] = x - p[2];
            res[3] = y - p[3];
            if let Some(j) = jac.as_mut() {
                j.add_row(0, 0, [-1.0, 0.0]);
                j.add_row(1, 0, [0.0, -1.0]);
                j.add_row(2, 0, [1.0, 0.0]);
                j.add_row(3, 0, [0.0, 1.0]);
            }
        }
        PoseDiff => {
            // absolute - (frame(parent) + relative)
            let frame = frame_at(&con.params, 0);
            let parent: &[f64] = if frame.has_variable() { values[2] } else { &[] };
            let o = frame.point(parent);
            for i in 0..2 {
                res[i] = values[0][i] - o[i] - values[1][i];
            }
            if let Some(j) = jac.as_mut() {
                j.add_identity(0, 0, 1.0);
                j.add_identity(0, 2, -1.0);
                if frame.has_variable() {
                    j.add_block(0, 4, &frame.point_jacobian(parent), -1.0);
                }
            }
        }
        Kin => {
            // (frame1(p1) + rel1) - (frame2(p2) + rel2)
            let f1 = frame_at(&con.params, 0);
            let f2 = frame_at(&con.params, 1);
            let mut next = 2;
            let mut take = |f: &Frame| -> Option<usize> {
                f.has_variable().then(|| {
                    next += 1;
                    next - 1
                })
            };
            let s1 = take(&f1);
            let s2 = take(&f2);
            let o1 = f1.point(s1.map_or(&[][..], |s| values[s]));
            let o2 = f2.point(s2.map_or(&[][..], |s| values[s]));
            for i in 0..2 {
                res[i] = o1[i] + values[0][i] - o2[i] - values[1][i];
            }
            if let Some(j) = jac.as_mut() {
                j.add_identity(0, 0, 1.0);
                j.add_identity(0, 2, -1.0);
                if let Some(s) = s1 {
                    j.add_block(0, 2 * s, &f1.point_jacobian(values[s]), 1.0);
                }
                if let Some(s) = s2 {
                    j.add_block(0, 2 * s, &f2.point_jacobian(values[s]), -1.0);
                }
            }
        }
        Collision => {
            let p = &con.params;
            let (fa, fb) = if p.len() > 3 {
                (
                    Frame::decode(&p[3..3 + FRAME_PARAMS]).expect("validated frame"),
                    Frame::decode(&p[3 + FRAME_PARAMS..]).expect("validated frame"),
                )
            } else {
                (Frame::Point, Frame::Point)
            };
            let pa = fa.point(values[0]);
            let pb = fb.point(values[1]);
            let d = [pa[0] - pb[0], pa[1] - pb[1]];
            let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
            res[0] = p[0] + p[1] + p[2] - n;
            if let Some(j) = jac.as_mut() {
                let u = if n > 0.0 {
                    [d[0] / n, d[1] / n]
                } else {
                    [1.0, 0.0]
                };
                let ja = fa.point_jacobian(values[0]);
                let jb = fb.point_jacobian(values[1]);
                // d(-|d|)/dx = -u^T J
                j.add_row(
                    0,
                    0,
                    [
                        -(u[0] * ja[0][0] + u[1] * ja[1][0]),
                        -(u[0] * ja[0][1] + u[1] * ja[1][1]),
                    ],
                );
                j.add_row(
                    0,
                    2,
                    [
                        u[0] * jb[0][0] + u[1] * jb[1][0],
                        u[0] * jb[0][1] + u[1] * jb[1][1],
                    ],
                );
            }
        }
        LinearIneq => {
            let mut s = 0.0;
            let mut k = 0;
            for v in values {
                for &x in v.iter() {
                    s += con.params[k] * x;
                    if let Some(j) = jac.as_mut() {
                        j.data[k] = con.params[k];
                    }
                    k += 1;
                }
            }
            res[0] = s - con.params[k];
        }
    }
}

/// Symmetric positive definite matrix in variable-band (skyline) storage,
/// lower triangle, factored in place.
struct Skyline {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl Skyline {
    fn new(first: Vec<usize>) -> Self {
        let mut start = Vec::with_capacity(first.len() + 1);
        let mut acc = 0;
        for (i, &f) in first.iter().enumerate() {
            start.push(acc);
            acc += i - f + 1;
        }
        start.push(acc);
        Self {
            first,
            start,
            data: vec![0.0; acc],
        }
    }

    fn n(&self) -> usize {
        self.first.len()
    }

    fn clear(&mut self) {
        self.data.iter_mut().for_each(|x| *x = 0.0);
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && j >= self.first[i]);
        self.start[i] + j - self.first[i]
    }

    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    fn diag(&self, i: usize) -> f64 {
        self.data[self.idx(i, i)]
    }

    fn copy_from(&mut self, other: &Skyline) {
        self.data.copy_from_slice(&other.data);
    }

    fn factor(&mut self) -> bool {
        let n = self.n();
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            for j in fi..i {
                let fj = self.first[j];
                let sj = self.start[j];
                let k0 = fi.max(fj);
                let mut s = self.data[si + j - fi];
                let a = &self.data[si + k0 - fi..si + j - fi];
                let b = &self.data[sj + k0 - fj..sj + j - fj];
                s -= a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                let ljj = self.data[sj + j - fj];
                self.data[si + j - fi] = s / ljj;
            }
            let row = &self.data[si..si + i - fi];
            let d = self.data[si + i - fi] - row.iter().map(|x| x * x).sum::<f64>();
            if !(d > 0.0) || !d.is_finite() {
                return false;
            }
            self.data[si + i - fi] = d.sqrt();
        }
        true
    }

    fn solve(&self, b: &mut [f64]) {
        let n = self.n();
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            let row = &self.data[si..si + i - fi];
            let s: f64 = row.iter().zip(&b[fi..i]).map(|(l, y)| l * y).sum();
            b[i] = (b[i] - s) / self.data[si + i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let si = self.start[i];
            b[i] /= self.data[si + i - fi];
            let xi = b[i];
            for (k, l) in (fi..i).zip(&self.data[si..si + i - fi]) {
                b[k] -= l * xi;
            }
        }
    }
}

/// One connected component laid out as a dense vector of unknowns.
struct Problem<'a> {
    graph: &'a FactoredNlp,
    cons: Vec<&'a ConstraintNode>,
    /// For each constraint, the offset of each scope member in `x`.
    scope_offset: Vec<Vec<usize>>,
    row_offset: Vec<usize>,
    jac_offset: Vec<usize>,
    n: usize,
    m: usize,
    first: Vec<usize>,
}

impl<'a> Problem<'a> {
    fn new(graph: &'a FactoredNlp, vars: &'a [VarId], cons: &[ConId]) -> Self {
        let mut var_offset = Vec::with_capacity(vars.len() + 1);
        let mut n = 0;
        for &v in vars {
            var_offset.push(n);
            n += graph.variable(v).dim;
        }
        var_offset.push(n);
        let local = |v: VarId| vars.binary_search(&v).expect("scope inside component");
        let cons: Vec<&ConstraintNode> = cons.iter().map(|&c| graph.constraint(c)).collect();
        let mut scope_offset = Vec::with_capacity(cons.len());
        let mut row_offset = Vec::with_capacity(cons.len() + 1);
        let mut jac_offset = Vec::with_capacity(cons.len() + 1);
        let (mut m, mut jn) = (0, 0);
        let mut first: Vec<usize> = (0..n).collect();
        for con in &cons {
            let offs: Vec<usize> = con.scope.iter().map(|&v| var_offset[local(v)]).collect();
            let cols: usize = con.scope.iter().map(|&v| graph.variable(v).dim).sum();
            let lo = *offs.iter().min().expect("non-empty scope");
            for (&o, &v) in offs.iter().zip(&con.scope) {
                for c in o..o + graph.variable(v).dim {
                    first[c] = first[c].min(lo);
                }
            }
            scope_offset.push(offs);
            row_offset.push(m);
            jac_offset.push(jn);
            m += con.residual_dim;
            jn += con.residual_dim * cols;
        }
        row_offset.push(m);
        jac_offset.push(jn);
        Self {
            graph,
            cons,
            scope_offset,
            row_offset,
            jac_offset,
            n,
            m,
            first,
        }
    }

    fn dims(&self, c: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let con = self.cons[c];
        self.scope_offset[c]
            .iter()
            .zip(&con.scope)
            .map(move |(&o, &v)| (o, self.graph.variable(v).dim))
    }

    /// Raw residuals (and Jacobians) of every constraint at `x`.
    fn evaluate(
        &self,
        x: &[f64],
        res: &mut [f64],
        jac: Option<&mut [f64]>,
    ) -> Result<(), SolverError> {
        let mut jac = jac;
        if let Some(j) = jac.as_deref_mut() {
            j.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut vals: Vec<&[f64]> = Vec::with_capacity(4);
        for (c, con) in self.cons.iter().enumerate() {
            vals.clear();
            for (o, d) in self.dims(c) {
                vals.push(&x[o..o + d]);
            }
            let r = &mut res[self.row_offset[c]..self.row_offset[c + 1]];
            let j = jac
                .as_deref_mut()
                .map(|j| &mut j[self.jac_offset[c]..self.jac_offset[c + 1]]);
            eval_constraint(con, &vals, r, j);
            if r.iter().any(|v| !v.is_finite()) {
                return Err(SolverError::NonFinite { constraint: con.id });
            }
        }
        Ok(())
    }

    fn max_violation(&self, res: &[f64]) -> f64 {
        self.cons
            .iter()
            .enumerate()
            .map(|(c, con)| violation(con, &res[self.row_offset[c]..self.row_offset[c + 1]]))
            .fold(0.0, f64::max)
    }
}

/// Augmented-Lagrangian state and scratch buffers for one component.
struct AlSolver<'p, 'a> {
    p: &'p Problem<'a>,
    cfg: &'p SolverConfig,
    res: Vec<f64>,
    jac: Vec<f64>,
    e: Vec<f64>,
    active: Vec<bool>,
    mult: Vec<f64>,
    rho: f64,
    /// When false only equality rows contribute (warm-up phase).
    with_ineq: bool,
    h: Skyline,
    k: Skyline,
    grad: Vec<f64>,
    lm: f64,
    iterations: usize,
}

impl<'p, 'a> AlSolver<'p, 'a> {
    fn new(p: &'p Problem<'a>, cfg: &'p SolverConfig) -> Self {
        Self {
            p,
            cfg,
            res: vec![0.0; p.m],
            jac: vec![0.0; *p.jac_offset.last().unwrap_or(&0)],
            e: vec![0.0; p.m],
            active: vec![false; p.m],
            mult: vec![0.0; p.m],
            rho: cfg.penalty_init,
            with_ineq: true,
            h: Skyline::new(p.first.clone()),
            k: Skyline::new(p.first.clone()),
            grad: vec![0.0; p.n],
            lm: 1e-4,
            iterations: 0,
        }
    }

    /// Shifted residuals `e` of the augmented merit `0.5 |e|^2` from `res`.
    fn shifted(&mut self) -> f64 {
        let mut merit = 0.0;
        for (c, con) in self.p.cons.iter().enumerate() {
            for r in self.p.row_offset[c]..self.p.row_offset[c + 1] {
                let shift = self.mult[r] / self.rho;
                let (e, act) = if con.is_equality {
                    (self.res[r] + shift, true)
                } else if !self.with_ineq {
                    (0.0, false)
                } else {
                    let t = self.res[r] + shift;
                    if t > 0.0 {
                        (t, true)
                    } else {
                        (0.0, false)
                    }
                };
                self.e[r] = e;
                self.active[r] = act;
                merit += 0.5 * e * e;
            }
        }
        merit
    }

    fn merit_at(&mut self, x: &[f64]) -> Result<f64, SolverError> {
        self.p.evaluate(x, &mut self.res, None)?;
        Ok(self.shifted())
    }

    fn build_normal_equations(&mut self) {
        self.h.clear();
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        let p = self.p;
        let mut cols: Vec<usize> = Vec::with_capacity(8);
        for c in 0..p.cons.len() {
            cols.clear();
            for (o, d) in p.dims(c) {
                cols.extend(o..o + d);
            }
            let nc = cols.len();
            let jac = &self.jac[p.jac_offset[c]..p.jac_offset[c + 1]];
            for (k, r) in (p.row_offset[c]..p.row_offset[c + 1]).enumerate() {
                if !self.active[r] {
                    continue;
                }
                let row = &jac[k * nc..(k + 1) * nc];
                let e = self.e[r];
                for a in 0..nc {
                    if row[a] == 0.0 {
                        continue;
                    }
                    self.grad[cols[a]] += row[a] * e;
                    for b in 0..=a {
                        if row[b] != 0.0 {
                            self.h.add(cols[a], cols[b], row[a] * row[b]);
                        }
                    }
                }
            }
        }
    }

    /// Damped Gauss-Newton on the augmented merit. Every accepted step
    /// strictly decreases the merit.
    fn minimize(&mut self, x: &mut Vec<f64>) -> Result<(), SolverError> {
        let n = self.p.n;
        self.p.evaluate(x, &mut self.res, Some(&mut self.jac))?;
        let mut merit = self.shifted();
        let mut dx = vec![0.0; n];
        let mut trial = vec![0.0; n];
        for _ in 0..self.cfg.max_inner_iters {
            self.iterations += 1;
            self.build_normal_equations();
            let gmax = self.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if gmax < 1e-13 || merit < 1e-30 {
                break;
            }
            let mut accepted = None;
            for _ in 0..10 {
                self.k.copy_from(&self.h);
                for i in 0..n {
                    let d = self.h.diag(i);
                    self.k.add(i, i, self.lm * (d + 1e-6));
                }
                if !self.k.factor() {
                    self.lm *= 10.0;
                    continue;
                }
                for i in 0..n {
                    dx[i] = -self.grad[i];
                }
                self.k.solve(&mut dx);
                for i in 0..n {
                    trial[i] = x[i] + dx[i];
                }
                let trial_merit = match self.merit_at(&trial) {
                    Ok(m) if m.is_finite() => m,
                    _ => f64::INFINITY,
                };
                if trial_merit < merit {
                    accepted = Some(trial_merit);
                    break;
                }
                self.lm *= 10.0;
            }
            let Some(new_merit) = accepted else {
                break;
            };
            std::mem::swap(x, &mut trial);
            self.lm = (self.lm / 4.0).max(1e-10);
            let decrease = merit - new_merit;
            self.p.evaluate(x, &mut self.res, Some(&mut self.jac))?;
            merit = self.shifted();
            if decrease <= 1e-10 * merit.max(1e-12) {
                break;
            }
        }
        Ok(())
    }

    fn update_multipliers(&mut self) {
        for (c, con) in self.p.cons.iter().enumerate() {
            for r in self.p.row_offset[c]..self.p.row_offset[c + 1] {
                let m = self.mult[r] + self.rho * self.res[r];
                self.mult[r] = if con.is_equality {
                    m.clamp(-1e9, 1e9)
                } else {
                    m.clamp(0.0, 1e9)
                };
            }
        }
    }

    /// One seeded attempt. Returns `(best x, best violation)`.
    fn attempt(&mut self, mut x: Vec<f64>) -> Result<(Vec<f64>, f64), SolverError> {
        let tol = self.cfg.feas_tol;
        self.mult.iter_mut().for_each(|m| *m = 0.0);
        self.rho = self.cfg.penalty_init;
        self.lm = 1e-4;

        // warm-up on the equalities alone settles poses that are tied to references
        self.with_ineq = false;
        self.minimize(&mut x)?;
        self.with_ineq = true;
        self.p.evaluate(&x, &mut self.res, None)?;
        let mut v = self.p.max_violation(&self.res);
        let mut best = (x.clone(), v);
        if v <= tol {
            return Ok(best);
        }
        let mut stall = 0;
        for _ in 0..self.cfg.max_outer_iters {
            self.minimize(&mut x)?;
            self.p.evaluate(&x, &mut self.res, None)?;
            let prev = v;
            v = self.p.max_violation(&self.res);
            if v < best.1 {
                if v < 0.95 * best.1 {
                    stall = 0;
                } else {
                    stall += 1;
                }
                best = (x.clone(), v);
            } else {
                stall += 1;
            }
            if v <= tol {
                return Ok(best);
            }
            if stall >= 3 && self.rho >= 1e3 {
                break;
            }
            self.update_multipliers();
            if v > 0.25 * prev {
                self.rho = (self.rho * self.cfg.penalty_growth).min(1e9);
            }
        }
        Ok(best)
    }
}

#[derive(Debug, Clone)]
struct ComponentResult {
    feasible: bool,
    x: Vec<f64>,
    violation: f64,
    restarts: usize,
    iterations: usize,
}

fn solve_component(
    graph: &FactoredNlp,
    vars: &[VarId],
    cons: &[ConId],
    cfg: &SolverConfig,
) -> Result<ComponentResult, SolverError> {
    let p = Problem::new(graph, vars, cons);
    let mut al = AlSolver::new(&p, cfg);
    let base_seed = seed::hash_ids(cfg.rng_seed, vars);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut restarts = 0;
    for attempt in 0..cfg.restarts {
        restarts = attempt + 1;
        let mut rng = seed::rng(seed::derive(base_seed, attempt as u64));
        let sigma = (cfg.init_noise * cfg.noise_growth.powi(attempt as i32))
            .min(cfg.max_init_noise.max(cfg.init_noise))
            .max(0.0);
        let noise = Normal::new(0.0, sigma).expect("finite noise level");
        let mut x0 = Vec::with_capacity(p.n);
        for &v in vars {
            for r in graph.variable(v).reference_value() {
                let jitter: f64 = if sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    // keep the stream aligned either way
                    let _: f64 = rng.random();
                    0.0
                };
                x0.push(r + jitter);
            }
        }
        let (x, v) = al.attempt(x0)?;
        let improved = best.as_ref().is_none_or(|b| v < b.1);
        if improved {
            best = Some((x, v));
        }
        if best.as_ref().is_some_and(|b| b.1 <= cfg.feas_tol) {
            break;
        }
    }
    let (x, violation) = best.expect("at least one restart");
    Ok(ComponentResult {
        feasible: violation <= cfg.feas_tol,
        x,
        violation,
        restarts,
        iterations: al.iterations,
    })
}

/// Memo of per-component verdicts for one graph.
///
/// Component solves are deterministic functions of the component's variable
/// set. On a miss, a feasible cached superset's assignment restricted to the
/// component is tried first: it satisfies every constraint of the smaller
/// induced subgraph, so a subset of a feasible set is never reported
/// infeasible.
#[derive(Debug)]
pub struct ComponentCache {
    graph: *const FactoredNlp,
    entries: Mutex<HashMap<Vec<VarId>, ComponentResult>>,
}

// The raw pointer is only compared, never dereferenced.
unsafe impl Send for ComponentCache {}
unsafe impl Sync for ComponentCache {}

impl ComponentCache {
    pub fn new(graph: &FactoredNlp) -> Self {
        Self {
            graph: graph as *const _,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The restriction of the smallest feasible cached superset of `comp`,
    /// if it checks out within `feas_tol`.
    fn inherited(
        &self,
        comp: &Subgraph<'_>,
        feas_tol: f64,
    ) -> Result<Option<ComponentResult>, SolverError> {
        let graph = comp.graph();
        let vars = comp.variables();
        let witness = {
            let entries = self.entries.lock().expect("cache lock");
            entries
                .iter()
                .filter(|(k, r)| r.feasible && k.len() > vars.len() && is_sorted_subset(vars, k))
                .min_by(|a, b| (a.0.len(), a.0).cmp(&(b.0.len(), b.0)))
                .map(|(k, r)| (k.clone(), r.x.clone()))
        };
        let Some((keys, x)) = witness else {
            return Ok(None);
        };
        let mut assignment = Assignment::default();
        let mut off = 0;
        for &v in &keys {
            let d = graph.variable(v).dim;
            if vars.binary_search(&v).is_ok() {
                assignment.values.insert(v, x[off..off + d].to_vec());
            }
            off += d;
        }
        let violation = assignment_violation(comp, &assignment)?;
        if violation > feas_tol {
            return Ok(None);
        }
        let x = vars
            .iter()
            .flat_map(|v| assignment.values[v].iter().copied())
            .collect();
        Ok(Some(ComponentResult {
            feasible: true,
            x,
            violation,
            restarts: 0,
            iterations: 0,
        }))
    }
}

/// The feasibility routine. Stateless apart from an atomic call counter.
#[derive(Debug)]
pub struct Solver {
    config: SolverConfig,
    solves: AtomicU64,
}

impl Clone for Solver {
    fn clone(&self) -> Self {
        Self::new(self.config.clone())
    }
}

impl Solver {
    pub fn new(config: SolverConfig) -> Self {
        Self {
            config,
            solves: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    /// Number of `solve` calls since construction or the last reset.
    pub fn count_solves(&self) -> u64 {
        self.solves.load(Ordering::Relaxed)
    }

    pub fn reset_count(&self) {
        self.solves.store(0, Ordering::Relaxed);
    }

    pub fn solve_graph(&self, graph: &FactoredNlp) -> Result<SolveOutcome, SolverError> {
        self.solve(&graph.full())
    }

    pub fn solve(&self, sub: &Subgraph<'_>) -> Result<SolveOutcome, SolverError> {
        self.solve_inner(sub, None)
    }

    pub fn solve_cached(
        &self,
        sub: &Subgraph<'_>,
        cache: &ComponentCache,
    ) -> Result<SolveOutcome, SolverError> {
        assert!(
            std::ptr::eq(cache.graph, sub.graph()),
            "component cache used with a different graph"
        );
        self.solve_inner(sub, Some(cache))
    }

    fn solve_inner(
        &self,
        sub: &Subgraph<'_>,
        cache: Option<&ComponentCache>,
    ) -> Result<SolveOutcome, SolverError> {
        self.solves.fetch_add(1, Ordering::Relaxed);
        let graph = sub.graph();
        let mut comps = sub.connected_components();
        // small components first: an infeasible one ends the search early
        comps.sort_by_key(|c| (c.len(), c.variables()[0]));
        let mut assignment = Assignment::default();
        let mut outcome = SolveOutcome {
            feasible: true,
            assignment: None,
            max_violation: 0.0,
            restarts_used: 0,
            iterations: 0,
        };
        for comp in &comps {
            let cached = cache.and_then(|c| {
                c.entries
                    .lock()
                    .expect("cache lock")
                    .get(comp.variables())
                    .cloned()
            });
            let result = match cached {
                Some(r) => r,
                None => {
                    let r = match cache {
                        Some(c) => c.inherited(comp, self.config.feas_tol)?,
                        None => None,
                    };
                    let r = match r {
                        Some(r) => r,
                        None => solve_component(
                            graph,
                            comp.variables(),
                            comp.constraints(),
                            &self.config,
                        )?,
                    };
                    if let Some(c) = cache {
                        c.entries
                            .lock()
                            .expect("cache lock")
                            .insert(comp.variables().to_vec(), r.clone());
                    }
                    r
                }
            };
            outcome.restarts_used = outcome.restarts_used.max(result.restarts);
            outcome.iterations += result.iterations;
            if !result.feasible {
                outcome.feasible = false;
                outcome.max_violation = result.violation;
                return Ok(outcome);
            }
            outcome.max_violation = outcome.max_violation.max(result.violation);
            let mut off = 0;
            for &v in comp.variables() {
                let d = graph.variable(v).dim;
                assignment.values.insert(v, result.x[off..off + d].to_vec());
                off += d;
            }
        }
        assert!(
            outcome.max_violation <= self.config.feas_tol,
            "feasible outcome above tolerance"
        );
        outcome.assignment = Some(assignment);
        Ok(outcome)
    }
}

/// Max violation of an assignment over the constraints of `sub`.
pub fn assignment_violation(
    sub: &Subgraph<'_>,
    assignment: &Assignment,
) -> Result<f64, SolverError> {
    let graph = sub.graph();
    let mut worst = 0.0f64;
    for &c in sub.constraints() {
        let con = graph.constraint(c);
        let vals: Vec<&[f64]> = con
            .scope
            .iter()
            .map(|v| assignment.get(*v).unwrap_or(&[]))
            .collect();
        let r = residual(con, &vals)?;
        worst = worst.max(violation(con, &r));
    }
    Ok(worst)
}

/// The `Solve` routine as seen by conflict extraction.
pub trait Feasibility: Sync {
    fn is_feasible(&self, sub: &Subgraph<'_>) -> Result<bool, SolverError>;
}

impl Feasibility for Solver {
    fn is_feasible(&self, sub: &Subgraph<'_>) -> Result<bool, SolverError> {
        Ok(self.solve(sub)?.feasible)
    }
}

/// A solver paired with a per-graph component cache.
pub struct CachedSolver<'s> {
    pub solver: &'s Solver,
    pub cache: ComponentCache,
}

impl<'s> CachedSolver<'s> {
    pub fn new(solver: &'s Solver, graph: &FactoredNlp) -> Self {
        Self {
            solver,
            cache: ComponentCache::new(graph),
        }
    }

    pub fn solve(&self, sub: &Subgraph<'_>) -> Result<SolveOutcome, SolverError> {
        self.solver.solve_cached(sub, &self.cache)
    }
}

impl Feasibility for CachedSolver<'_> {
    fn is_feasible(&self, sub: &Subgraph<'_>) -> Result<bool, SolverError> {
        Ok(self.solve(sub)?.feasible)
    }
}
