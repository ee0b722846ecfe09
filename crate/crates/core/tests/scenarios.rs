use std::sync::Arc;

use alleviate_core::engine::{Engine, EngineConfig, MemorySink, NullSink};
use alleviate_core::kg::{EntityId, Path, PredicatePattern};
use alleviate_core::safety::ActionType;
use alleviate_core::{extract_recommendations, ProviderNote, Resources};
use chrono::{TimeZone, Utc};

const NOTE: &str = include_str!("../data/fixture-note.txt");

fn setup() -> (Engine, EntityId, String) {
    let engine = Engine::new(Arc::new(Resources::bundled()), EngineConfig::default()).unwrap();
    let p = EntityId::patient("p1").unwrap();
    let at = Utc.with_ymd_and_hms(2024, 3, 4, 10, 0, 0).unwrap();
    let note = ProviderNote { note_id: "n1".into(), patient_id: p.clone(), text: NOTE.into(), authored_at: at };
    engine.ingest_note(&note, &NullSink).unwrap();
    let s = engine.open_session(&p, at, &NullSink).unwrap();
    (engine, p, s)
}

#[test]
fn fixture_note_yields_exercise_recommendation() {
    let (engine, p, _) = setup();
    let (recs, warnings) = extract_recommendations(&engine.patient_graph(&p).unwrap(), &p);
    assert!(warnings.is_empty(), "{warnings:?}");
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].activity.label(), "exercise");
    assert_eq!(recs[0].target_count, 5);
}

#[test]
fn adherence_praise_and_encourage() {
    let (engine, _, s) = setup();
    let at = Utc.with_ymd_and_hms(2024, 3, 8, 18, 0, 0).unwrap();
    let out = engine.send_message(&s, "I exercised 5 days this week", at, &NullSink).unwrap();
    assert_eq!(out.reply.action_type, ActionType::AdherencePraise, "{}", out.reply.text);
    for n in 0..5 {
        let out = engine.send_message(&s, &format!("I exercised {n} days this week"), at, &NullSink).unwrap();
        assert_eq!(out.reply.action_type, ActionType::AdherenceEncourage, "count {n}: {}", out.reply.text);
        assert!(out.reply.text.contains(&(5 - n).to_string()));
    }
}

// brute force: every walk of exactly three edges out of the patient
fn three_edge_walks(g: &alleviate_core::KnowledgeGraph, start: &EntityId) -> Vec<Path> {
    let mut out = Vec::new();
    for a in g.outgoing(start) {
        let Some(n1) = a.object.as_entity() else { continue };
        for b in g.outgoing(n1) {
            let Some(n2) = b.object.as_entity() else { continue };
            for c in g.outgoing(n2) {
                let Some(n3) = c.object.as_entity() else { continue };
                out.push(Path {
                    nodes: vec![start.clone(), n1.clone(), n2.clone(), n3.clone()],
                    edges: vec![a.clone(), b.clone(), c.clone()],
                });
            }
        }
    }
    out
}

#[test]
fn dizziness_hypothesis_names_sertraline() {
    let (engine, p, s) = setup();
    let at = Utc.with_ymd_and_hms(2024, 3, 5, 9, 0, 0).unwrap();
    let out = engine.send_message(&s, "I feel dizzy", at, &NullSink).unwrap();
    assert_eq!(out.reply.action_type, ActionType::HypothesisOffer, "{}", out.reply.text);
    assert!(out.reply.text.contains("sertraline"));
    let view = engine.patient_view(&p).unwrap();
    let support = &out.reply.support[0];
    assert_eq!(support.len(), 3);
    assert!(support.is_well_formed());
    assert!(support.edges.iter().all(|e| view.contains(e)));
    let oracle: Vec<Path> = three_edge_walks(&view, &p)
        .into_iter()
        .filter(|w| w.edges[0].predicate == "takes" && w.edges[2].predicate == "has_side_effect")
        .filter(|w| w.end().label() == "dizziness")
        .collect();
    assert_eq!(oracle, vec![support.clone()]);
    let engine_paths = view
        .find_paths(
            &p,
            &[PredicatePattern::exact("takes"), PredicatePattern::exact("same_as"), PredicatePattern::exact("has_side_effect")],
            Some(support.end()),
            3,
        )
        .unwrap();
    assert_eq!(engine_paths, oracle);
}

#[test]
fn plan_utterance_escalates_once() {
    let (engine, _, s) = setup();
    let sink = MemorySink::default();
    let at = Utc.with_ymd_and_hms(2024, 3, 5, 23, 0, 0).unwrap();
    let out = engine.send_message(&s, "I have a plan to kill myself", at, &sink).unwrap();
    assert_eq!(out.reply.action_type, ActionType::EmergencyAlert);
    assert_eq!(out.alerts.len(), 1);
    let again = engine.send_message(&s, "I have a plan to kill myself", at, &sink).unwrap();
    assert!(again.alerts.is_empty());
    let emergencies = engine.alerts_since(0).into_iter().filter(|a| a.alert.level == alleviate_core::screeners::AlertLevel::Emergency).count();
    assert_eq!(emergencies, 1);
}
