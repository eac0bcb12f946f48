//! Evaluation protocols: per-variable accuracy, subgraph-prediction ratios
//! and solve-count benchmarks of the extraction methods.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conflicts::{
    expert_prefix, extract_with_scores, ConflictError, Counting, DeletionFilter, ExpertPrefix,
    ExtractConfig, LabeledInstance, QuickXplain, Reducer,
};
use crate::gnn::{accuracy_pair, GnnModel};
use crate::graph::{is_sorted_subset, VarId};
use crate::solver::{CachedSolver, Feasibility, Solver, SolverConfig};

/// Accuracy pair of a model over all variables of a dataset.
pub fn dataset_accuracy(
    model: &GnnModel,
    data: &[LabeledInstance],
) -> Result<(f64, f64), ConflictError> {
    let scores =
        crate::gnn::predict_all(model, data).map_err(|e| ConflictError::Model(e.to_string()))?;
    Ok(accuracy_from_scores(data, &scores))
}

pub fn accuracy_from_scores(data: &[LabeledInstance], scores: &[Vec<f64>]) -> (f64, f64) {
    let s: Vec<f64> = scores.concat();
    let y: Vec<u8> = data.iter().flat_map(|i| i.labels.iter().copied()).collect();
    accuracy_pair(&s, &y)
}

/// Ground-truth labels as scores.
pub fn label_scores(data: &[LabeledInstance]) -> Vec<Vec<f64>> {
    data.iter()
        .map(|i| i.labels.iter().map(|&y| f64::from(y)).collect())
        .collect()
}

/// Counts behind the subgraph-prediction ratios.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphCounts {
    /// Stored conflicts.
    pub stored: usize,
    /// Stored conflicts contained in some predicted component.
    pub found: usize,
    /// Stored conflicts equal to some predicted component.
    pub exact: usize,
    /// Predicted components.
    pub predicted: usize,
    /// Predicted components that are feasible.
    pub predicted_feasible: usize,
}

impl SubgraphCounts {
    pub fn found_over_total(&self) -> f64 {
        ratio(self.found, self.stored)
    }

    pub fn minimal_over_found(&self) -> f64 {
        ratio(self.exact, self.found)
    }

    pub fn false_infeasible(&self) -> f64 {
        ratio(self.predicted_feasible, self.predicted)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Connected components of `G[{x : score(x) < delta}]`, as sorted variable sets.
pub fn predicted_components(inst: &LabeledInstance, scores: &[f64], delta: f64) -> Vec<Vec<VarId>> {
    let selected = (0..inst.graph.num_variables()).filter(|&v| scores[v] < delta);
    let sub = inst
        .graph
        .induced_subgraph(selected)
        .expect("variable ids come from the graph");
    sub.connected_components()
        .into_iter()
        .map(|c| c.variables().to_vec())
        .collect()
}

/// Compares the components predicted at `delta` with the stored conflicts.
/// Every predicted component is solved once.
pub fn subgraph_counts(
    data: &[LabeledInstance],
    scores: &[Vec<f64>],
    delta: f64,
    solve: &dyn Feasibility,
) -> Result<SubgraphCounts, ConflictError> {
    let mut out = SubgraphCounts::default();
    for (i, (inst, s)) in data.iter().zip(scores).enumerate() {
        let comps = predicted_components(inst, s, delta);
        for c in &inst.conflicts {
            if comps.iter().any(|g| is_sorted_subset(&c.variables, g)) {
                out.found += 1;
            }
            if comps.contains(&c.variables) {
                out.exact += 1;
            }
        }
        out.stored += inst.conflicts.len();
        out.predicted += comps.len();
        for g in comps {
            let sub = inst.graph.induced_sorted(g);
            let feasible = solve
                .is_feasible(&sub)
                .map_err(|e| ConflictError::Instance {
                    instance: i,
                    source: Box::new(e.into()),
                })?;
            if feasible {
                out.predicted_feasible += 1;
            }
        }
    }
    Ok(out)
}

/// Whether every component of the zero-labeled variables is exactly one
/// stored conflict.
pub fn has_disconnected_conflicts(inst: &LabeledInstance) -> bool {
    if inst.conflicts.is_empty() {
        return false;
    }
    let scores: Vec<f64> = inst.labels.iter().map(|&y| f64::from(y)).collect();
    let stored: HashSet<&[VarId]> = inst
        .conflicts
        .iter()
        .map(|c| c.variables.as_slice())
        .collect();
    predicted_components(inst, &scores, 0.5)
        .iter()
        .all(|g| stored.contains(g.as_slice()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Solve and reduce once on a stored conflict.
    Oracle,
    /// Deletion filter on the full graph.
    General1,
    /// QuickXplain on the full graph.
    General2,
    /// Growing keyframe prefixes, then QuickXplain.
    Expert,
    /// Score-guided extraction with the prefix reducer.
    GnnExpert,
    /// Score-guided extraction with the deletion filter.
    GnnG1,
    /// Score-guided extraction with QuickXplain.
    GnnG2,
    /// Score-guided extraction with ground-truth labels as scores.
    LabelScoresG2,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Oracle,
        Method::General1,
        Method::General2,
        Method::Expert,
        Method::GnnExpert,
        Method::GnnG1,
        Method::GnnG2,
        Method::LabelScoresG2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Oracle => "Oracle",
            Method::General1 => "General 1",
            Method::General2 => "General 2",
            Method::Expert => "Expert",
            Method::GnnExpert => "GNN+e",
            Method::GnnG1 => "GNN+g1",
            Method::GnnG2 => "GNN+g2",
            Method::LabelScoresG2 => "Labels+g2",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Method::GnnExpert | Method::GnnG1 | Method::GnnG2)
    }
}

/// Runs one method on one infeasible instance and returns its solve count.
pub fn run_method(
    method: Method,
    inst: &LabeledInstance,
    scores: Option<&[f64]>,
    solve: &dyn Feasibility,
    extract: &ExtractConfig,
) -> Result<u64, ConflictError> {
    let counted = Counting::new(solve);
    let graph = &inst.graph;
    let guided = |reduce: &dyn Reducer, s: &[f64]| -> Result<(), ConflictError> {
        let out = extract_with_scores(graph, s, &counted, reduce, extract)?;
        if out.conflicts.is_empty() {
            return Err(ConflictError::InputFeasible);
        }
        Ok(())
    };
    match method {
        Method::Oracle => {
            let c = inst.conflicts.first().ok_or(ConflictError::InputFeasible)?;
            let sub = c.subgraph(graph)?;
            QuickXplain.reduce_checked(&sub, &counted)?;
        }
        Method::General1 => {
            DeletionFilter.reduce_checked(&graph.full(), &counted)?;
        }
        Method::General2 => {
            QuickXplain.reduce_checked(&graph.full(), &counted)?;
        }
        Method::Expert => {
            expert_prefix(&graph.full(), &counted, &QuickXplain)?;
        }
        Method::GnnExpert | Method::GnnG1 | Method::GnnG2 => {
            let s =
                scores.ok_or_else(|| ConflictError::Model("method needs model scores".into()))?;
            match method {
                Method::GnnExpert => guided(&ExpertPrefix { inner: QuickXplain }, s)?,
                Method::GnnG1 => guided(&DeletionFilter, s)?,
                _ => guided(&QuickXplain, s)?,
            }
        }
        Method::LabelScoresG2 => {
            let s: Vec<f64> = inst.labels.iter().map(|&y| f64::from(y)).collect();
            guided(&QuickXplain, &s)?;
        }
    }
    Ok(counted.calls())
}

/// Per-instance results of one method; `None` marks a failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: Method,
    pub solves: Vec<Option<u64>>,
    pub seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub instances: usize,
    pub failures: usize,
    pub solves: u64,
    pub seconds: f64,
    /// Solve count and time relative to the reference row.
    pub norm_count: f64,
    pub norm_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub reference: String,
    pub runs: Vec<MethodRun>,
    /// Indices of instances whose conflicts are pairwise disconnected.
    pub disconnected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub solver: SolverConfig,
    pub extract: ExtractConfig,
    pub methods: Vec<Method>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            extract: ExtractConfig::default(),
            methods: Method::ALL.to_vec(),
        }
    }
}

/// Runs every configured method on every instance, one after the other,
/// each with its own solve counter and component cache. Instances must be infeasible with at
/// least one stored conflict.
pub fn bench(
    data: &[LabeledInstance],
    model: Option<&GnnModel>,
    config: &BenchConfig,
) -> Result<BenchReport, ConflictError> {
    if let Some(i) = data.iter().position(|d| d.conflicts.is_empty()) {
        return Err(ConflictError::Instance {
            instance: i,
            source: Box::new(ConflictError::Model(
                "benchmark instances need a stored conflict".into(),
            )),
        });
    }
    let methods: Vec<Method> = config
        .methods
        .iter()
        .copied()
        .filter(|m| model.is_some() || !m.needs_model())
        .collect();
    let scores: Option<Vec<Vec<f64>>> = match model {
        Some(m) => Some(
            crate::gnn::predict_all(m, data).map_err(|e| ConflictError::Model(e.to_string()))?,
        ),
        None => None,
    };
    let solver = Solver::new(config.solver.clone());
    let mut runs: Vec<MethodRun> = methods
        .iter()
        .map(|&method| MethodRun {
            method,
            solves: Vec::with_capacity(data.len()),
            seconds: Vec::with_capacity(data.len()),
        })
        .collect();
    for (i, inst) in data.iter().enumerate() {
        for run in runs.iter_mut() {
            let before = solver.count_solves();
            let t = Instant::now();
            let s = scores.as_ref().map(|s| s[i].as_slice());
            let cached = CachedSolver::new(&solver, &inst.graph);
            let r = run_method(run.method, inst, s, &cached, &config.extract);
            run.seconds.push(t.elapsed().as_secs_f64());
            match r {
                Ok(n) => {
                    assert_eq!(solver.count_solves() - before, n, "solve accounting");
                    run.solves.push(Some(n));
                }
                Err(e) => {
                    log::warn!("{} failed on instance {i}: {e}", run.method.name());
                    run.solves.push(None);
                }
            }
        }
    }
    let reference = if methods.contains(&Method::GnnG1) {
        Method::GnnG1
    } else {
        methods.first().copied().unwrap_or(Method::General2)
    };
    Ok(BenchReport {
        reference: reference.name().to_string(),
        runs,
        disconnected: data
            .iter()
            .enumerate()
            .filter(|(_, d)| has_disconnected_conflicts(d))
            .map(|(i, _)| i)
            .collect(),
    })
}

impl BenchReport {
    pub fn run(&self, method: Method) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.method == method)
    }

    /// Total solve count of a method over the given instances (all when
    /// `None`), failures excluded.
    pub fn total(&self, method: Method, subset: Option<&[usize]>) -> Option<u64> {
        let run = self.run(method)?;
        let sum = match subset {
            Some(idx) => idx.iter().filter_map(|&i| run.solves[i]).sum(),
            None => run.solves.iter().flatten().sum(),
        };
        Some(sum)
    }

    /// Aggregate rows normalized by the reference method's totals.
    pub fn rows(&self) -> Vec<BenchRow> {
        let reference = self.runs.iter().find(|r| r.method.name() == self.reference);
        let (ref_count, ref_time) = reference
            .map(|r| {
                (
                    r.solves.iter().flatten().sum::<u64>() as f64,
                    r.seconds.iter().sum::<f64>(),
                )
            })
            .unwrap_or((1.0, 1.0));
        self.runs
            .iter()
            .map(|r| {
                let solves: u64 = r.solves.iter().flatten().sum();
                let seconds: f64 = r.seconds.iter().sum();
                BenchRow {
                    method: r.method.name().to_string(),
                    instances: r.solves.len(),
                    failures: r.solves.iter().filter(|s| s.is_none()).count(),
                    solves,
                    seconds,
                    norm_count: solves as f64 / ref_count.max(1.0),
                    norm_time: if ref_time > 0.0 {
                        seconds / ref_time
                    } else {
                        f64::NAN
                    },
                }
            })
            .collect()
    }

    /// Solve counts only; identical across reruns.
    pub fn counts_csv(&self) -> String {
        let mut s = String::from("method,instances,failures,solves,normalized_count\n");
        for r in self.rows() {
            writeln!(
                s,
                "{},{},{},{},{:.6}",
                r.method, r.instances, r.failures, r.solves, r.norm_count
            )
            .expect("string write");
        }
        let sub = &self.disconnected;
        for m in [Method::Oracle, Method::LabelScoresG2] {
            if let Some(t) = self.total(m, Some(sub)) {
                writeln!(s, "{} (disconnected),{},0,{},", m.name(), sub.len(), t)
                    .expect("string write");
            }
        }
        s
    }

    /// Wall-clock columns; these vary between runs.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("method,seconds,normalized_time\n");
        for r in self.rows() {
            writeln!(s, "{},{:.6},{:.6}", r.method, r.seconds, r.norm_time).expect("string write");
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>9} {:>9} {:>10} {:>8} {:>8}\n",
            "method", "instances", "solves", "seconds", "count/ref", "time/ref"
        );
        for r in self.rows() {
            writeln!(
                s,
                "{:<12} {:>9} {:>9} {:>10.3} {:>8.3} {:>8.3}",
                r.method,
                r.instances - r.failures,
                r.solves,
                r.seconds,
                r.norm_count,
                r.norm_time
            )
            .expect("string write");
        }
        writeln!(s, "normalized by {}", self.reference).expect("string write");
        s
    }
}
