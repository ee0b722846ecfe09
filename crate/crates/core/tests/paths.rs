mod oracles;

use alleviate_core::kg::{EntityId, KnowledgeGraph, PredicatePattern, Provenance, Triple};
use proptest::prelude::*;

const PREDICATES: [&str; 3] = ["p", "q", "r"];

fn build(n: usize, edges: &[(usize, usize, usize)]) -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new("g");
    for (i, &(s, p, o)) in edges.iter().enumerate() {
        let t = Triple::new(
            EntityId::kb(&format!("n{}", s % n)).unwrap(),
            PREDICATES[p % 3],
            EntityId::kb(&format!("n{}", o % n)).unwrap(),
            0.5,
            Provenance::KnowledgeBase { kb_id: "g".into(), record_id: format!("r{}", i % 4) },
        );
        g.add_triple(t).unwrap();
    }
    g
}

fn graph_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize, usize)>)> {
    (2usize..=30).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0usize..3, 0..n), 1..40)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn find_paths_equals_brute_force((n, edges) in graph_strategy(), pat in prop::collection::vec(prop::option::of(0usize..3), 1..=3), end_pick in prop::option::of(0usize..30)) {
        let g = build(n, &edges);
        let start = g.triples()[0].subject.clone();
        let end = end_pick.map(|e| EntityId::kb(&format!("n{}", e % n)).unwrap());
        let pattern: Vec<PredicatePattern> = pat.iter().map(|p| match p {
            Some(i) => PredicatePattern::exact(PREDICATES[*i]),
            None => PredicatePattern::Any,
        }).collect();
        let oracle_pat: Vec<Option<&str>> = pat.iter().map(|p| p.map(|i| PREDICATES[i])).collect();
        let got = g.find_paths(&start, &pattern, end.as_ref(), 6).unwrap();
        let want = oracles::brute_force_paths(&g, &start, &oracle_pat, end.as_ref());
        prop_assert_eq!(oracles::path_keys(&got), oracles::path_keys(&want));
        for p in &got {
            prop_assert!(p.is_well_formed());
            prop_assert!(p.edges.iter().all(|e| g.contains(e)));
        }
        // sorted by node sequence
        for w in got.windows(2) {
            prop_assert!(w[0].nodes <= w[1].nodes);
        }
    }

    #[test]
    fn tsv_round_trip_preserves_triples((n, edges) in graph_strategy()) {
        let g = build(n, &edges);
        let back = KnowledgeGraph::from_tsv("g", &g.to_tsv()).unwrap();
        prop_assert_eq!(g.key_set(), back.key_set());
    }
}

#[test]
fn cycle_does_not_loop() {
    let g = build(3, &[(0, 0, 1), (1, 0, 2), (2, 0, 0)]);
    let start = EntityId::kb("n0").unwrap();
    let pat = vec![PredicatePattern::Any; 3];
    assert!(g.find_paths(&start, &pat, None, 6).unwrap().is_empty());
    let pat = vec![PredicatePattern::Any; 2];
    assert_eq!(g.find_paths(&start, &pat, None, 6).unwrap().len(), 1);
}
