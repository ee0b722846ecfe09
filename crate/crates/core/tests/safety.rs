mod oracles;

use alleviate_core::kg::{EntityId, KnowledgeGraph, Provenance, Triple};
use alleviate_core::safety::{check_action, parse_constraints, render_constraints, ActionType, Bindings, Decision, SafetyError};
use proptest::prelude::*;

const PREDS: [&str; 4] = ["takes", "allergic_to", "same_as", "has_side_effect"];

fn node(i: usize) -> EntityId {
    if i == 0 {
        EntityId::patient("p1").unwrap()
    } else {
        EntityId::kb(&format!("e{i}")).unwrap()
    }
}

fn build(edges: &[(usize, usize, usize)]) -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new("g");
    for &(s, p, o) in edges {
        g.add_triple(Triple::new(node(s), PREDS[p], node(o), 1.0, Provenance::ProviderNote { note_id: "n".into(), span: (0, 1) }))
            .unwrap();
    }
    g
}

fn rule_strategy() -> impl Strategy<Value = String> {
    (
        "[a-z][a-z0-9_]{0,8}",
        0usize..7,
        any::<bool>(),
        prop::collection::vec(prop::option::of(0usize..4), 1..=3),
        prop::option::of(1usize..6),
    )
        .prop_map(|(name, a, require, preds, end)| {
            let preds: Vec<&str> = preds.iter().map(|p| p.map_or("*", |i| PREDS[i])).collect();
            let end = end.map_or("?x".to_string(), |e| node(e).to_string());
            format!(
                "RULE {name} ON {} {} PATH $patient -[{}]-> {end}",
                ActionType::ALL[a],
                if require { "REQUIRE" } else { "FORBID" },
                preds.join(",")
            )
        })
}

proptest! {
    #[test]
    fn rules_round_trip(rules in prop::collection::vec(rule_strategy(), 1..6)) {
        let text = rules.join("\n");
        let parsed = parse_constraints(&text).unwrap();
        let again = parse_constraints(&render_constraints(&parsed)).unwrap();
        prop_assert_eq!(parsed, again);
    }

    #[test]
    fn verdict_agrees_with_path_oracle(
        rules in prop::collection::vec(rule_strategy(), 1..5),
        edges in prop::collection::vec((0usize..6, 0usize..4, 1usize..6), 1..20),
        action in 0usize..7,
    ) {
        let parsed = parse_constraints(&rules.join("\n")).unwrap();
        let g = build(&edges);
        let action = ActionType::ALL[action];
        let mut b = Bindings::new();
        b.insert("$patient".into(), node(0));
        let v = check_action(action, &b, &g, &parsed).unwrap();
        // oracle: first failing relevant rule in file order
        let mut expected = None;
        for r in parsed.iter().filter(|r| r.action_type == action) {
            let pat: Vec<Option<&str>> = r.predicates.iter().map(|p| match p {
                alleviate_core::kg::PredicatePattern::Any => None,
                alleviate_core::kg::PredicatePattern::Exact(s) => Some(s.as_str()),
            }).collect();
            let end = match &r.end {
                alleviate_core::safety::Term::Entity(e) => Some(e.clone()),
                _ => None,
            };
            let n = if g.contains_entity(&node(0)) { oracles::brute_force_paths(&g, &node(0), &pat, end.as_ref()).len() } else { 0 };
            let fails = match r.mode {
                alleviate_core::safety::Mode::Require => n == 0,
                alleviate_core::safety::Mode::Forbid => n > 0,
            };
            if fails {
                expected = Some(r.name.clone());
                break;
            }
        }
        prop_assert_eq!(v.violated.clone(), expected.clone());
        prop_assert_eq!(v.decision == Decision::Allowed, expected.is_none());
        for ev in &v.evidence {
            prop_assert!(ev.path.is_well_formed());
            prop_assert!(ev.path.edges.iter().all(|e| g.contains(e)));
        }
    }
}

#[test]
fn unbound_start_variable_is_an_error() {
    let rules = parse_constraints("RULE r ON smalltalk REQUIRE PATH ?who -[takes]-> ?x").unwrap();
    let mut b = Bindings::new();
    b.insert("$patient".into(), node(0));
    let g = build(&[(0, 0, 1)]);
    assert_eq!(check_action(ActionType::Smalltalk, &b, &g, &rules), Err(SafetyError::UnboundVariable("?who".into())));
}
