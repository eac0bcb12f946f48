//! Minimal conflict extraction over variable-induced subgraphs.
//!
//! All routines take the feasibility test as a [`Feasibility`] object so they
//! can run against the real solver, a cached solver, or a planted oracle.
//! Every subset test is on the variable-induced closure `G[S]`.

use std::collections::{HashSet, VecDeque};
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnn::GnnModel;
use crate::graph::{is_sorted_subset, FactoredNlp, GraphDocument, GraphError, Subgraph, VarId};
use crate::solver::{Feasibility, SolverError};

#[derive(Debug, Error)]
pub enum ConflictError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("input subgraph is feasible")]
    InputFeasible,
    #[error("{n} variables exceed the enumeration limit of {max}")]
    TooLarge { n: usize, max: usize },
    #[error("instance {instance}: {source}")]
    Instance {
        instance: usize,
        #[source]
        source: Box<ConflictError>,
    },
    #[error("{0}")]
    Model(String),
}

/// An infeasible variable set. `minimal` is set only after an explicit
/// [`check_minimal`] pass (or by exhaustive enumeration).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Conflict {
    pub variables: Vec<VarId>,
    pub minimal: bool,
}

impl Conflict {
    pub fn new(mut variables: Vec<VarId>) -> Self {
        variables.sort_unstable();
        variables.dedup();
        Self {
            variables,
            minimal: false,
        }
    }

    pub fn subgraph<'g>(&self, graph: &'g FactoredNlp) -> Result<Subgraph<'g>, GraphError> {
        graph.induced_subgraph(self.variables.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }
}

fn test(
    solve: &dyn Feasibility,
    graph: &FactoredNlp,
    vars: Vec<VarId>,
) -> Result<bool, SolverError> {
    solve.is_feasible(&graph.induced_sorted(vars))
}

/// Shrinks an infeasible subgraph to a minimal conflict.
///
/// Implementations assume the input is infeasible and do not spend a solve
/// on confirming it; use [`Reducer::reduce_checked`] when that is unknown.
pub trait Reducer: Sync {
    fn name(&self) -> &str;

    fn reduce(
        &self,
        sub: &Subgraph<'_>,
        solve: &dyn Feasibility,
    ) -> Result<Conflict, ConflictError>;

    fn reduce_checked(
        &self,
        sub: &Subgraph<'_>,
        solve: &dyn Feasibility,
    ) -> Result<Conflict, ConflictError> {
        if solve.is_feasible(sub)? {
            return Err(ConflictError::InputFeasible);
        }
        self.reduce(sub, solve)
    }
}

/// Linear deletion filter: one solve per input variable.
pub fn deletion_filter(
    sub: &Subgraph<'_>,
    solve: &dyn Feasibility,
) -> Result<Conflict, ConflictError> {
    let graph = sub.graph();
    let mut keep: Vec<VarId> = sub.variables().to_vec();
    let mut i = 0;
    while i < keep.len() {
        let mut trial = keep.clone();
        trial.remove(i);
        if test(solve, graph, trial.clone())? {
            i += 1;
        } else {
            keep = trial;
        }
    }
    Ok(Conflict::new(keep))
}

/// Divide-and-conquer extraction (QuickXplain) over variables. Lower ids
/// are preferred, i.e. kept in the background earlier.
pub fn quickxplain(sub: &Subgraph<'_>, solve: &dyn Feasibility) -> Result<Conflict, ConflictError> {
    let graph = sub.graph();
    let vars = sub.variables().to_vec();
    if vars.is_empty() {
        return Ok(Conflict::new(vars));
    }
    let found = qx(graph, solve, &[], false, &vars)?;
    Ok(Conflict::new(found))
}

fn union_sorted(a: &[VarId], b: &[VarId]) -> Vec<VarId> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.sort_unstable();
    out.dedup();
    out
}

fn qx(
    graph: &FactoredNlp,
    solve: &dyn Feasibility,
    background: &[VarId],
    delta_nonempty: bool,
    candidates: &[VarId],
) -> Result<Vec<VarId>, ConflictError> {
    if delta_nonempty && !test(solve, graph, background.to_vec())? {
        return Ok(Vec::new());
    }
    if candidates.len() == 1 {
        return Ok(candidates.to_vec());
    }
    let (c1, c2) = candidates.split_at(candidates.len() / 2);
    let d2 = qx(
        graph,
        solve,
        &union_sorted(background, c1),
        !c1.is_empty(),
        c2,
    )?;
    let d1 = qx(
        graph,
        solve,
        &union_sorted(background, &d2),
        !d2.is_empty(),
        c1,
    )?;
    Ok(union_sorted(&d1, &d2))
}

pub struct DeletionFilter;

impl Reducer for DeletionFilter {
    fn name(&self) -> &str {
        "deletion"
    }

    fn reduce(
        &self,
        sub: &Subgraph<'_>,
        solve: &dyn Feasibility,
    ) -> Result<Conflict, ConflictError> {
        deletion_filter(sub, solve)
    }
}

pub struct QuickXplain;

impl Reducer for QuickXplain {
    fn name(&self) -> &str {
        "quickxplain"
    }

    fn reduce(
        &self,
        sub: &Subgraph<'_>,
        solve: &dyn Feasibility,
    ) -> Result<Conflict, ConflictError> {
        quickxplain(sub, solve)
    }
}

/// Temporal-prefix heuristic: test `G[{x : time(x) <= t}]` for growing `t`
/// and reduce the first infeasible prefix.
pub struct ExpertPrefix<R> {
    pub inner: R,
}

impl<R: Reducer> Reducer for ExpertPrefix<R> {
    fn name(&self) -> &str {
        "expert"
    }

    /// The last prefix is the input itself, which is assumed infeasible, so
    /// it is handed to the inner reducer without another solve.
    fn reduce(
        &self,
        sub: &Subgraph<'_>,
        solve: &dyn Feasibility,
    ) -> Result<Conflict, ConflictError> {
        prefix_scan(sub, solve, &self.inner, true)
    }
}

/// Expert baseline on a graph whose feasibility is unknown: every prefix,
/// including the full graph, is solved before reducing.
pub fn expert_prefix(
    sub: &Subgraph<'_>,
    solve: &dyn Feasibility,
    reduce: &dyn Reducer,
) -> Result<Conflict, ConflictError> {
    prefix_scan(sub, solve, reduce, false)
}

fn prefix_scan<R: Reducer + ?Sized>(
    sub: &Subgraph<'_>,
    solve: &dyn Feasibility,
    reduce: &R,
    assume_infeasible: bool,
) -> Result<Conflict, ConflictError> {
    let graph = sub.graph();
    let mut times: Vec<u32> = sub
        .variables()
        .iter()
        .map(|&v| graph.variable(v).time)
        .collect();
    times.sort_unstable();
    times.dedup();
    for (k, &t) in times.iter().enumerate() {
        let prefix: Vec<VarId> = sub
            .variables()
            .iter()
            .copied()
            .filter(|&v| graph.variable(v).time <= t)
            .collect();
        let prefix = graph.induced_sorted(prefix);
        let last = k + 1 == times.len();
        if last && assume_infeasible {
            return reduce.reduce(&prefix, solve);
        }
        if !solve.is_feasible(&prefix)? {
            return reduce.reduce(&prefix, solve);
        }
    }
    Err(ConflictError::InputFeasible)
}

/// True iff `G[S]` is infeasible and every `G[S \ {x}]` is feasible.
pub fn check_minimal(
    graph: &FactoredNlp,
    variables: &[VarId],
    solve: &dyn Feasibility,
) -> Result<bool, ConflictError> {
    let sub = graph.induced_subgraph(variables.iter().copied())?;
    if solve.is_feasible(&sub)? {
        return Ok(false);
    }
    for &x in sub.variables() {
        if !solve.is_feasible(&sub.without(&[x]))? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Sets the certificate flag by running [`check_minimal`].
pub fn certify(
    graph: &FactoredNlp,
    conflict: &mut Conflict,
    solve: &dyn Feasibility,
) -> Result<bool, ConflictError> {
    conflict.minimal = check_minimal(graph, &conflict.variables, solve)?;
    Ok(conflict.minimal)
}

pub const BRUTE_FORCE_LIMIT: usize = 14;

/// Every minimal infeasible variable-induced subgraph of `sub`, by
/// enumerating subsets in increasing size.
///
/// Subsets whose induced subgraph is disconnected are skipped: if such a
/// set were infeasible, one of its components would be a smaller conflict
/// found earlier. Results are sorted by size, then lexicographically.
pub fn brute_force_conflicts(
    sub: &Subgraph<'_>,
    solve: &dyn Feasibility,
) -> Result<Vec<Conflict>, ConflictError> {
    let n = sub.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(ConflictError::TooLarge {
            n,
            max: BRUTE_FORCE_LIMIT,
        });
    }
    let graph = sub.graph();
    let vars = sub.variables();
    let mut masks: Vec<u32> = (1u32..(1u32 << n)).collect();
    masks.sort_by_key(|m| (m.count_ones(), m.reverse_bits()));
    let mut found: Vec<u32> = Vec::new();
    let mut out = Vec::new();
    for m in masks {
        if found.iter().any(|&f| m | f == m) {
            continue;
        }
        let set: Vec<VarId> = (0..n)
            .filter(|i| m >> i & 1 == 1)
            .map(|i| vars[i])
            .collect();
        let s = graph.induced_sorted(set);
        if s.connected_components().len() != 1 {
            continue;
        }
        if !solve.is_feasible(&s)? {
            found.push(m);
            out.push(Conflict {
                variables: s.variables().to_vec(),
                minimal: true,
            });
        }
    }
    out.sort_by(|a, b| (a.len(), &a.variables).cmp(&(b.len(), &b.variables)));
    Ok(out)
}

/// A graph with per-variable labels and the conflicts that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInstance {
    pub graph: FactoredNlp,
    /// `0` for variables in some stored conflict, `1` otherwise.
    pub labels: Vec<u8>,
    pub conflicts: Vec<Conflict>,
    pub seed: Option<u64>,
}

impl LabeledInstance {
    pub fn new(graph: FactoredNlp, conflicts: Vec<Conflict>) -> Self {
        let labels = labels_from_conflicts(graph.num_variables(), &conflicts);
        Self {
            graph,
            labels,
            conflicts,
            seed: None,
        }
    }

    pub fn is_infeasible(&self) -> bool {
        !self.conflicts.is_empty()
    }

    /// Re-derives labels from the stored conflicts and compares.
    pub fn labels_consistent(&self) -> bool {
        self.labels == labels_from_conflicts(self.graph.num_variables(), &self.conflicts)
    }

    pub fn to_record(&self) -> InstanceRecord {
        InstanceRecord {
            graph: self.graph.to_document(),
            labels: self.labels.clone(),
            conflicts: self.conflicts.iter().map(|c| c.variables.clone()).collect(),
            minimal: self.conflicts.iter().map(|c| c.minimal).collect(),
            seed: self.seed,
        }
    }

    pub fn from_record(rec: InstanceRecord) -> Result<Self, GraphError> {
        let graph = FactoredNlp::from_document(&rec.graph)?;
        let n = graph.num_variables();
        if rec.labels.len() != n || rec.labels.iter().any(|&y| y > 1) {
            return Err(GraphError::Record(
                "labels must be 0/1, one per variable".into(),
            ));
        }
        let mut conflicts = Vec::with_capacity(rec.conflicts.len());
        for (k, vars) in rec.conflicts.into_iter().enumerate() {
            if let Some(&bad) = vars.iter().find(|&&v| v >= n) {
                return Err(GraphError::UnknownVariable(bad));
            }
            let mut c = Conflict::new(vars);
            c.minimal = rec.minimal.get(k).copied().unwrap_or(false);
            conflicts.push(c);
        }
        Ok(Self {
            graph,
            labels: rec.labels,
            conflicts,
            seed: rec.seed,
        })
    }
}

pub fn labels_from_conflicts(n: usize, conflicts: &[Conflict]) -> Vec<u8> {
    let mut labels = vec![1u8; n];
    for c in conflicts {
        for &v in &c.variables {
            labels[v] = 0;
        }
    }
    labels
}

/// One JSONL line of a labeled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub graph: GraphDocument,
    pub labels: Vec<u8>,
    pub conflicts: Vec<Vec<VarId>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub minimal: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub fn write_instances<W: Write>(
    instances: &[LabeledInstance],
    mut w: W,
) -> Result<(), GraphError> {
    for inst in instances {
        let line = serde_json::to_string(&inst.to_record()).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| GraphError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn read_instances<R: BufRead>(reader: R) -> Result<Vec<LabeledInstance>, GraphError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| GraphError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord = serde_json::from_str(&line).map_err(|e| GraphError::Parse {
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        out.push(LabeledInstance::from_record(rec)?);
    }
    Ok(out)
}

/// Counts calls made through it, independently of the wrapped object.
pub struct Counting<'a> {
    inner: &'a dyn Feasibility,
    calls: AtomicU64,
}

impl<'a> Counting<'a> {
    pub fn new(inner: &'a dyn Feasibility) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Feasibility for Counting<'_> {
    fn is_feasible(&self, sub: &Subgraph<'_>) -> Result<bool, SolverError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.is_feasible(sub)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    pub max_conflicts: usize,
    /// Stop expanding the search once this many solves have been spent.
    pub max_solves: u64,
    /// Run [`check_minimal`] on every stored conflict.
    pub certify: bool,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            max_conflicts: 10,
            max_solves: 400,
            certify: true,
        }
    }
}

/// Finds up to `max_conflicts` distinct minimal conflicts and derives labels.
///
/// The search is breadth-first over exclusion sets: a node excludes one
/// variable from each conflict found on its path, so every conflict found
/// below it differs from those. A conflict already found that avoids the
/// exclusion set is reused without solving, and exclusion sets containing
/// one whose remainder was feasible are pruned.
pub fn label_variables(
    graph: &FactoredNlp,
    solve: &dyn Feasibility,
    reduce: &dyn Reducer,
    config: &LabelConfig,
) -> Result<LabeledInstance, ConflictError> {
    let counted = Counting::new(solve);
    let n = graph.num_variables();
    let mut conflicts: Vec<Conflict> = Vec::new();
    let mut feasible_exclusions: Vec<Vec<VarId>> = Vec::new();
    let mut seen: HashSet<Vec<VarId>> = HashSet::new();
    let mut queue: VecDeque<Vec<VarId>> = VecDeque::from([Vec::new()]);
    while let Some(excluded) = queue.pop_front() {
        if conflicts.len() >= config.max_conflicts || counted.calls() >= config.max_solves {
            break;
        }
        if feasible_exclusions
            .iter()
            .any(|f| is_sorted_subset(f, &excluded))
        {
            continue;
        }
        let reused = conflicts
            .iter()
            .find(|c| {
                c.variables
                    .iter()
                    .all(|v| excluded.binary_search(v).is_err())
            })
            .cloned();
        let conflict = match reused {
            Some(c) => c,
            None => {
                let rest: Vec<VarId> = (0..n)
                    .filter(|v| excluded.binary_search(v).is_err())
                    .collect();
                let sub = graph.induced_sorted(rest);
                if counted.is_feasible(&sub)? {
                    feasible_exclusions.push(excluded);
                    continue;
                }
                let mut c = reduce.reduce(&sub, &counted)?;
                if c.is_empty() {
                    continue;
                }
                if config.certify {
                    certify(graph, &mut c, &counted)?;
                }
                if !conflicts.contains(&c) {
                    conflicts.push(c.clone());
                }
                c
            }
        };
        for &v in &conflict.variables {
            let mut child = excluded.clone();
            let pos = child.binary_search(&v).unwrap_or_else(|p| p);
            child.insert(pos, v);
            if seen.insert(child.clone()) {
                queue.push_back(child);
            }
        }
    }
    conflicts.truncate(config.max_conflicts);
    Ok(LabeledInstance::new(graph.clone(), conflicts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    pub delta_init: f64,
    pub delta_ratio: f64,
    /// Keep going after the first conflict, skipping candidates that
    /// contain one already found.
    pub find_all: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            delta_init: 0.5,
            delta_ratio: 1.2,
            find_all: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub conflicts: Vec<Conflict>,
    /// Candidate components handed to the feasibility test.
    pub candidates_solved: usize,
    /// Threshold in effect when the loop ended.
    pub final_delta: f64,
}

/// Score-guided extraction: candidate conflicts are the connected
/// components of `G[{x : score(x) < delta}]` for a rising threshold.
/// Once `delta` exceeds one the whole graph is the (last) candidate.
///
/// A candidate identical to one already found feasible at a lower
/// threshold is not solved again.
pub fn extract_with_scores(
    graph: &FactoredNlp,
    scores: &[f64],
    solve: &dyn Feasibility,
    reduce: &dyn Reducer,
    config: &ExtractConfig,
) -> Result<Extraction, ConflictError> {
    assert_eq!(
        scores.len(),
        graph.num_variables(),
        "one score per variable"
    );
    assert!(config.delta_ratio > 1.0 && config.delta_init > 0.0);
    let mut delta = config.delta_init;
    let mut found: Vec<Conflict> = Vec::new();
    let mut feasible_seen: HashSet<Vec<VarId>> = HashSet::new();
    let mut candidates_solved = 0;
    loop {
        let last = delta > 1.0;
        let selected: Vec<VarId> = if last {
            (0..graph.num_variables()).collect()
        } else {
            (0..graph.num_variables())
                .filter(|&v| scores[v] < delta)
                .collect()
        };
        let sub = graph.induced_sorted(selected);
        for g in sub.connected_components() {
            if config.find_all
                && found
                    .iter()
                    .any(|c| is_sorted_subset(&c.variables, g.variables()))
            {
                continue;
            }
            if feasible_seen.contains(g.variables()) {
                continue;
            }
            candidates_solved += 1;
            if solve.is_feasible(&g)? {
                feasible_seen.insert(g.variables().to_vec());
                continue;
            }
            let c = reduce.reduce(&g, solve)?;
            found.push(c);
            if !config.find_all {
                return Ok(Extraction {
                    conflicts: found,
                    candidates_solved,
                    final_delta: delta,
                });
            }
        }
        if last || delta > 1.5 {
            return Ok(Extraction {
                conflicts: found,
                candidates_solved,
                final_delta: delta,
            });
        }
        delta *= config.delta_ratio;
    }
}

/// Score-guided extraction with scores from a trained model.
pub fn gnn_extract(
    graph: &FactoredNlp,
    model: &GnnModel,
    solve: &dyn Feasibility,
    reduce: &dyn Reducer,
    config: &ExtractConfig,
) -> Result<Extraction, ConflictError> {
    let scores = model
        .forward(graph)
        .map_err(|e| ConflictError::Model(e.to_string()))?;
    extract_with_scores(graph, &scores, solve, reduce, config)
}

/// Feasibility oracle for tests: a set is infeasible iff it contains one of
/// the planted variable sets. Counts its calls.
#[derive(Debug, Default)]
pub struct KnownConflictOracle {
    pub planted: Vec<Vec<VarId>>,
    calls: AtomicU64,
}

impl KnownConflictOracle {
    pub fn new(mut planted: Vec<Vec<VarId>>) -> Self {
        for p in &mut planted {
            p.sort_unstable();
            p.dedup();
        }
        Self {
            planted,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Feasibility for KnownConflictOracle {
    fn is_feasible(&self, sub: &Subgraph<'_>) -> Result<bool, SolverError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(!self
            .planted
            .iter()
            .any(|p| is_sorted_subset(p, sub.variables())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::six_graph;

    fn oracle(sets: &[&[VarId]]) -> KnownConflictOracle {
        KnownConflictOracle::new(sets.iter().map(|s| s.to_vec()).collect())
    }

    #[test]
    fn deletion_on_minimal_input_costs_k() {
        let g = six_graph();
        let o = oracle(&[&[0, 1, 2]]);
        let sub = g.induced_subgraph([0, 1, 2]).unwrap();
        let c = deletion_filter(&sub, &o).unwrap();
        assert_eq!(c.variables, vec![0, 1, 2]);
        assert_eq!(o.calls(), 3);
    }

    #[test]
    fn deletion_drops_extra_variable() {
        let g = six_graph();
        let o = oracle(&[&[1, 2]]);
        let c = deletion_filter(&g.induced_subgraph([1, 2, 5]).unwrap(), &o).unwrap();
        assert_eq!(c.variables, vec![1, 2]);
    }

    #[test]
    fn quickxplain_singleton_and_pair() {
        let g = six_graph();
        let o = oracle(&[&[4]]);
        assert_eq!(quickxplain(&g.full(), &o).unwrap().variables, vec![4]);
        let o = oracle(&[&[1, 5]]);
        assert_eq!(quickxplain(&g.full(), &o).unwrap().variables, vec![1, 5]);
        // prefers lower ids between two conflicts
        let o = oracle(&[&[3, 4], &[0, 1]]);
        assert_eq!(quickxplain(&g.full(), &o).unwrap().variables, vec![0, 1]);
    }

    #[test]
    fn checked_reduce_rejects_feasible_input() {
        let g = six_graph();
        let o = oracle(&[]);
        assert!(matches!(
            QuickXplain.reduce_checked(&g.full(), &o),
            Err(ConflictError::InputFeasible)
        ));
    }

    #[test]
    fn brute_force_finds_connected_plants() {
        let g = six_graph();
        // {0,1} and {4,5} are each connected in the six-variable graph
        let o = oracle(&[&[0, 1], &[4, 5]]);
        let all = brute_force_conflicts(&g.full(), &o).unwrap();
        let sets: Vec<_> = all.iter().map(|c| c.variables.clone()).collect();
        assert_eq!(sets, vec![vec![0, 1], vec![4, 5]]);
        assert!(all.iter().all(|c| c.minimal));
        assert!(brute_force_conflicts(&g.full(), &oracle(&[]))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn minimality_check() {
        let g = six_graph();
        let o = oracle(&[&[0, 1]]);
        assert!(check_minimal(&g, &[0, 1], &o).unwrap());
        assert!(!check_minimal(&g, &[0, 1, 2], &o).unwrap());
        assert!(!check_minimal(&g, &[2, 3], &o).unwrap());
    }

    #[test]
    fn labeling_recovers_two_conflicts() {
        let g = six_graph();
        let o = oracle(&[&[0, 1], &[4, 5]]);
        let inst = label_variables(&g, &o, &QuickXplain, &LabelConfig::default()).unwrap();
        assert_eq!(inst.labels, vec![0, 0, 1, 1, 0, 0]);
        assert_eq!(inst.conflicts.len(), 2);
        assert!(inst.conflicts.iter().all(|c| c.minimal));
        assert!(inst.labels_consistent());
    }

    #[test]
    fn labeling_feasible_graph() {
        let g = six_graph();
        let inst =
            label_variables(&g, &oracle(&[]), &DeletionFilter, &LabelConfig::default()).unwrap();
        assert_eq!(inst.labels, vec![1; 6]);
        assert!(inst.conflicts.is_empty());
    }

    #[test]
    fn labeling_respects_budget() {
        let g = six_graph();
        let o = oracle(&[&[0], &[1], &[2], &[3]]);
        let cfg = LabelConfig {
            max_conflicts: 2,
            ..LabelConfig::default()
        };
        let inst = label_variables(&g, &o, &QuickXplain, &cfg).unwrap();
        assert_eq!(inst.conflicts.len(), 2);
    }

    #[test]
    fn all_ones_scores_degenerate_to_full_reduce() {
        let g = six_graph();
        let o = oracle(&[&[2, 4]]);
        let ex = extract_with_scores(&g, &[1.0; 6], &o, &QuickXplain, &ExtractConfig::default())
            .unwrap();
        let guided = o.calls();
        let o2 = oracle(&[&[2, 4]]);
        assert!(!o2.is_feasible(&g.full()).unwrap());
        quickxplain(&g.full(), &o2).unwrap();
        assert_eq!(guided, o2.calls());
        assert_eq!(ex.conflicts[0].variables, vec![2, 4]);
        assert_eq!(ex.candidates_solved, 1);
    }

    #[test]
    fn perfect_scores_find_all() {
        let g = six_graph();
        let o = oracle(&[&[0, 1], &[4, 5]]);
        let scores = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let cfg = ExtractConfig {
            find_all: true,
            ..ExtractConfig::default()
        };
        let ex = extract_with_scores(&g, &scores, &o, &DeletionFilter, &cfg).unwrap();
        let sets: Vec<_> = ex.conflicts.iter().map(|c| c.variables.clone()).collect();
        assert_eq!(sets, vec![vec![0, 1], vec![4, 5]]);
        assert_eq!(ex.candidates_solved, 2);
    }

    #[test]
    fn feasible_graph_extracts_nothing() {
        let g = six_graph();
        let o = oracle(&[]);
        let ex = extract_with_scores(&g, &[0.3; 6], &o, &QuickXplain, &ExtractConfig::default())
            .unwrap();
        assert!(ex.conflicts.is_empty());
        assert!(ex.final_delta > 1.0);
    }

    #[test]
    fn expert_reduces_first_infeasible_prefix() {
        let mut g = FactoredNlp::new();
        for t in 0..6u32 {
            g.add_variable(2, crate::graph::VarClass::ObjectAbsolute, t, vec![0.0, 0.0])
                .unwrap();
        }
        let o = oracle(&[&[0, 1]]);
        let c = expert_prefix(&g.full(), &o, &DeletionFilter).unwrap();
        assert_eq!(c.variables, vec![0, 1]);
        // prefixes t<=0 and t<=1, then the two deletions on {0,1}
        assert_eq!(o.calls(), 4);
        assert!(matches!(
            expert_prefix(&g.full(), &oracle(&[]), &DeletionFilter),
            Err(ConflictError::InputFeasible)
        ));
    }

    #[test]
    fn record_round_trip() {
        let g = six_graph();
        let mut c = Conflict::new(vec![1, 0]);
        c.minimal = true;
        let inst = LabeledInstance::new(g, vec![c]);
        let mut buf = Vec::new();
        write_instances(std::slice::from_ref(&inst), &mut buf).unwrap();
        let back = read_instances(buf.as_slice()).unwrap();
        assert_eq!(back, vec![inst]);
    }
}
