use std::collections::BTreeMap;

use alleviate_core::dialogue::{IntentKind, ResponseCandidate};
use alleviate_core::kg::{EntityId, KnowledgeGraph, Provenance, Triple};
use alleviate_core::link::fnv1a64;
use alleviate_core::policy::{
    select_response, AdherenceBucket, EscalationBucket, FeedbackEvent, FeedbackSource, PolicyState, ResponsePolicy, Signal,
};
use alleviate_core::safety::{check_action, parse_constraints, ActionType, Bindings};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STATE: PolicyState =
    PolicyState { intent: IntentKind::Other, escalation: EscalationBucket::None, adherence: AdherenceBucket::Unknown };

fn candidate(id: &str, action: ActionType, drug: &str) -> ResponseCandidate {
    let mut bindings = Bindings::new();
    bindings.insert("$patient".into(), EntityId::patient("p1").unwrap());
    bindings.insert("?drug".into(), EntityId::kb(drug).unwrap());
    ResponseCandidate {
        template_id: id.into(),
        action_type: action,
        text: id.into(),
        bindings,
        evidence: vec![],
        support: vec![],
    }
}

struct RunResult {
    greedy: String,
    masked_picks: usize,
}

fn bandit_run(run: u64) -> RunResult {
    let rules = parse_constraints("RULE on_plan ON medication_advice REQUIRE PATH $patient -[takes]-> ?drug").unwrap();
    let mut g = KnowledgeGraph::new("patient:p1");
    g.add_triple(Triple::new(
        EntityId::patient("p1").unwrap(),
        "takes",
        EntityId::kb("sertraline").unwrap(),
        1.0,
        Provenance::SelfReport { session_id: "s".into(), message_id: "m".into() },
    ))
    .unwrap();
    let arms = vec![
        candidate("arm1", ActionType::Smalltalk, "x"),
        candidate("arm2", ActionType::Smalltalk, "x"),
        candidate("arm3", ActionType::Smalltalk, "x"),
        candidate("arm4", ActionType::MedicationAdvice, "lithium"),
    ];
    let rates: BTreeMap<&str, f64> = [("arm1", 0.9), ("arm2", 0.5), ("arm3", 0.1), ("arm4", 1.0)].into_iter().collect();
    let mut policy = ResponsePolicy::new(0.1, 0.1).unwrap();
    let mut env = ChaCha8Rng::seed_from_u64(1_000 + run);
    let mut masked_picks = 0;
    for t in 0..5_000u64 {
        let survivors: Vec<ResponseCandidate> = arms
            .iter()
            .filter(|c| check_action(c.action_type, &c.bindings, &g, &rules).unwrap().is_allowed())
            .cloned()
            .collect();
        let seed = fnv1a64(format!("{run}:{t}").as_bytes());
        let (chosen, _) = select_response(STATE, &survivors, &policy, seed).unwrap();
        if chosen.template_id == "arm4" {
            masked_picks += 1;
        }
        let signal = if env.gen::<f64>() < rates[chosen.template_id.as_str()] { Signal::Positive } else { Signal::Negative };
        policy.update(STATE, &chosen.template_id, signal.reward()).unwrap();
    }
    let greedy = policy.greedy(STATE, ["arm1", "arm2", "arm3"]).unwrap().to_string();
    RunResult { greedy, masked_picks }
}

#[test]
fn bandit_converges_and_never_picks_masked_arm() {
    let mut wins = 0;
    for run in 0..100 {
        let r = bandit_run(run);
        assert_eq!(r.masked_picks, 0);
        if r.greedy == "arm1" {
            wins += 1;
        }
    }
    assert!(wins >= 95, "arm1 greedy in {wins}/100 runs");
}

#[test]
fn selection_is_deterministic_per_seed() {
    let arms = vec![candidate("a", ActionType::Smalltalk, "x"), candidate("b", ActionType::Smalltalk, "x")];
    let p = ResponsePolicy::new(0.5, 0.1).unwrap();
    for seed in 0..50 {
        let (x, sx) = select_response(STATE, &arms, &p, seed).unwrap();
        let (y, sy) = select_response(STATE, &arms, &p, seed).unwrap();
        assert_eq!(x.template_id, y.template_id);
        assert_eq!(sx, sy);
    }
}

#[test]
fn clinician_feedback_moves_further() {
    let mut p = ResponsePolicy::new(0.1, 0.1).unwrap().with_clinician_weight(3.0).unwrap();
    let fb = |source| FeedbackEvent { session_id: "s".into(), message_id: "m".into(), source, signal: Signal::Positive };
    let q_patient = p.clone().update_from(STATE, "a", &fb(FeedbackSource::Patient)).unwrap();
    let q_clin = p.update_from(STATE, "a", &fb(FeedbackSource::Clinician)).unwrap();
    assert!((q_patient - 0.1).abs() < 1e-15);
    assert!((q_clin - 0.3).abs() < 1e-15);
}

proptest! {
    #[test]
    fn q_stays_within_reward_range(alpha in 0.01f64..=1.0, w in 0.1f64..20.0, rewards in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let mut p = ResponsePolicy::new(0.1, alpha).unwrap().with_clinician_weight(w).unwrap();
        let mut prev = 0.0;
        for (pos, clin) in rewards {
            let fb = FeedbackEvent {
                session_id: "s".into(),
                message_id: "m".into(),
                source: if clin { FeedbackSource::Clinician } else { FeedbackSource::Patient },
                signal: if pos { Signal::Positive } else { Signal::Negative },
            };
            let q = p.update_from(STATE, "a", &fb).unwrap();
            prop_assert!((-1.0..=1.0).contains(&q));
            // each update moves toward its reward
            if pos { prop_assert!(q >= prev) } else { prop_assert!(q <= prev) }
            prev = q;
        }
    }

    #[test]
    fn policy_json_round_trips(values in prop::collection::vec((0usize..30, "[a-z]{1,6}", -1.0f64..1.0, 0u64..1000), 0..20)) {
        let mut p = ResponsePolicy::new(0.2, 0.3).unwrap();
        let states = PolicyState::all();
        for (s, t, v, c) in values {
            p.set_cell(states[s], &t, alleviate_core::policy::Cell { value: v, count: c });
        }
        let back = ResponsePolicy::from_json(&p.to_json()).unwrap();
        prop_assert_eq!(back.epsilon, p.epsilon);
        let a: Vec<_> = p.cells().map(|(s, t, c)| (*s, t.to_string(), c.value.to_bits(), c.count)).collect();
        let b: Vec<_> = back.cells().map(|(s, t, c)| (*s, t.to_string(), c.value.to_bits(), c.count)).collect();
        prop_assert_eq!(a, b);
    }
}
