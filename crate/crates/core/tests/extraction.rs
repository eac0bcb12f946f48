use fnlp_core::domain::{planted_instance, Pattern};
use fnlp_core::eval::{label_scores, subgraph_counts};
use fnlp_core::{
    check_minimal, extract_with_scores, Counting, DeletionFilter, ExtractConfig, Feasibility,
    LabeledInstance, QuickXplain, Reducer, Solver, SolverConfig,
};

fn planted(seed: u64) -> LabeledInstance {
    let patterns = [
        Pattern::ALL[seed as usize % 3],
        Pattern::ALL[(seed as usize + 1) % 3],
    ];
    let p = planted_instance(&patterns, 16, seed).unwrap();
    let conflicts = p
        .conflicts
        .into_iter()
        .map(fnlp_core::Conflict::new)
        .collect();
    LabeledInstance::new(p.graph, conflicts)
}

/// Cost of the last extraction round done by hand: components in order, one solve
/// each, then a reduce of the first infeasible one.
fn solve_then_reduce(inst: &LabeledInstance, solve: &dyn Feasibility, reduce: &dyn Reducer) -> u64 {
    let counted = Counting::new(solve);
    for g in inst.graph.full().connected_components() {
        if !counted.is_feasible(&g).unwrap() {
            reduce.reduce(&g, &counted).unwrap();
            break;
        }
    }
    counted.calls()
}

#[test]
fn all_ones_scores_cost_exactly_solve_and_reduce() {
    let solver = Solver::new(SolverConfig::default());
    for seed in 0..12u64 {
        let inst = planted(seed);
        let ones = vec![1.0; inst.graph.num_variables()];
        for reduce in [&QuickXplain as &dyn Reducer, &DeletionFilter] {
            let counted = Counting::new(&solver);
            let out = extract_with_scores(
                &inst.graph,
                &ones,
                &counted,
                reduce,
                &ExtractConfig::default(),
            )
            .unwrap();
            assert_eq!(out.conflicts.len(), 1);
            assert_eq!(
                counted.calls(),
                solve_then_reduce(&inst, &solver, reduce),
                "seed {seed}"
            );
        }
    }
}

#[test]
fn label_scores_find_every_conflict_exactly() {
    let solver = Solver::new(SolverConfig::default());
    let data: Vec<LabeledInstance> = (0..10).map(planted).collect();
    let counts = subgraph_counts(&data, &label_scores(&data), 0.5, &solver).unwrap();
    assert_eq!(counts.stored, 20);
    assert_eq!(counts.found_over_total(), 1.0);
    assert_eq!(counts.minimal_over_found(), 1.0);
    assert_eq!(counts.false_infeasible(), 0.0);
}

#[test]
fn find_all_recovers_every_planted_conflict() {
    let solver = Solver::new(SolverConfig::default());
    let cfg = ExtractConfig {
        find_all: true,
        ..ExtractConfig::default()
    };
    for seed in 0..10u64 {
        let inst = planted(seed);
        let scores = label_scores(std::slice::from_ref(&inst)).remove(0);
        let out = extract_with_scores(&inst.graph, &scores, &solver, &QuickXplain, &cfg).unwrap();
        let mut got: Vec<Vec<usize>> = out.conflicts.iter().map(|c| c.variables.clone()).collect();
        got.sort();
        let mut want: Vec<Vec<usize>> =
            inst.conflicts.iter().map(|c| c.variables.clone()).collect();
        want.sort();
        assert_eq!(got, want, "seed {seed}");
        for c in &out.conflicts {
            assert!(check_minimal(&inst.graph, &c.variables, &solver).unwrap());
        }
    }
}

#[test]
fn feasible_graph_yields_nothing() {
    let solver = Solver::new(SolverConfig::default());
    let p = planted_instance(&[], 12, 5).unwrap();
    let zeros = vec![0.0; p.graph.num_variables()];
    let out = extract_with_scores(
        &p.graph,
        &zeros,
        &solver,
        &QuickXplain,
        &ExtractConfig::default(),
    )
    .unwrap();
    assert!(out.conflicts.is_empty());
}
