mod common;

use std::collections::BTreeSet;

use fnlp_core::conflicts::KnownConflictOracle;
use fnlp_core::{deletion_filter, quickxplain, FactoredNlp, Feasibility};
use proptest::prelude::*;

fn graph_and_subset() -> impl Strategy<Value = (FactoredNlp, Vec<usize>)> {
    (any::<u64>(), 4usize..16, 0usize..30).prop_flat_map(|(seed, n, m)| {
        let g = common::random_graph(seed, n, m);
        let k = g.num_variables();
        (Just(g), proptest::collection::vec(0..k, 0..k))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn induced_subgraph_keeps_exactly_the_covered_constraints((g, pick) in graph_and_subset()) {
        let sub = g.induced_subgraph(pick.iter().copied()).unwrap();
        let set: BTreeSet<usize> = pick.iter().copied().collect();
        let sorted: Vec<usize> = set.iter().copied().collect();
        prop_assert_eq!(sub.variables(), sorted.as_slice());
        let want: Vec<usize> = g
            .constraints()
            .iter()
            .filter(|c| c.scope.iter().all(|v| set.contains(v)))
            .map(|c| c.id)
            .collect();
        prop_assert_eq!(sub.constraints(), want.as_slice());
    }

    #[test]
    fn components_partition_the_subgraph((g, pick) in graph_and_subset()) {
        let sub = g.induced_subgraph(pick.iter().copied()).unwrap();
        let comps = sub.connected_components();
        let mut vars: Vec<usize> = comps.iter().flat_map(|c| c.variables().to_vec()).collect();
        let mut cons: Vec<usize> = comps.iter().flat_map(|c| c.constraints().to_vec()).collect();
        vars.sort_unstable();
        cons.sort_unstable();
        prop_assert_eq!(vars.as_slice(), sub.variables());
        prop_assert_eq!(cons.as_slice(), sub.constraints());
        for c in &comps {
            prop_assert!(!c.is_empty());
            // each component is itself an induced subgraph and is connected
            let again = g.induced_subgraph(c.variables().iter().copied()).unwrap();
            prop_assert_eq!(again.constraints(), c.constraints());
            prop_assert_eq!(again.connected_components().len(), 1);
        }
    }

    #[test]
    fn serialization_round_trips((g, _) in graph_and_subset()) {
        let back = FactoredNlp::deserialize(&g.serialize()).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(back.serialize(), g.serialize());
    }

    #[test]
    fn oracle_infeasibility_is_monotone((g, pick) in graph_and_subset(), planted in proptest::collection::vec(0usize..4, 1..3)) {
        let o = KnownConflictOracle::new(vec![planted]);
        let sub = g.induced_subgraph(pick.iter().copied()).unwrap();
        if !o.is_feasible(&sub).unwrap() {
            prop_assert!(!o.is_feasible(&g.full()).unwrap());
        }
    }

    #[test]
    fn reducers_return_a_planted_set(seed in any::<u64>(), n in 4usize..24, k in 1usize..5, extra in 0usize..3) {
        let g = common::random_graph(seed, n, 2 * n);
        let mut r = common::rng(seed ^ 0x55);
        let mut plants = Vec::new();
        for _ in 0..=extra {
            let p = common::permutation(&mut r, g.num_variables());
            plants.push(p[..k.min(g.num_variables())].to_vec());
        }
        let o = KnownConflictOracle::new(plants);
        let df = deletion_filter(&g.full(), &o).unwrap();
        let df_calls = o.calls();
        prop_assert!(o.planted.contains(&df.variables));
        prop_assert!(df_calls <= g.num_variables() as u64);
        let qx = quickxplain(&g.full(), &o).unwrap();
        prop_assert!(o.planted.contains(&qx.variables));
    }
}

#[test]
fn quickxplain_beats_deletion_on_small_conflicts() {
    let (mut qx_total, mut df_total) = (0u64, 0u64);
    for seed in 0..200u64 {
        let g = common::random_graph(seed, 20, 40);
        let mut r = common::rng(seed);
        let k = 1 + (seed % 4) as usize;
        let p = common::permutation(&mut r, 20);
        let o = KnownConflictOracle::new(vec![p[..k].to_vec()]);
        deletion_filter(&g.full(), &o).unwrap();
        df_total += o.calls();
        let o = KnownConflictOracle::new(vec![p[..k].to_vec()]);
        quickxplain(&g.full(), &o).unwrap();
        qx_total += o.calls();
    }
    assert!(
        qx_total < df_total,
        "quickxplain {qx_total} vs deletion {df_total}"
    );
}
