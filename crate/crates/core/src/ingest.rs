//! Rule-pattern triple extraction from provider notes and chat turns.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, KgError, KnowledgeGraph, Literal, Object, Provenance, Triple};

pub const RECOMMENDED_ACTIVITY: &str = "recommended_activity";
pub const FREQUENCY_PER_WEEK: &str = "frequency_per_week";
const PATIENT_PLACEHOLDER: &str = "$patient";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("pattern {pattern_id}: {message}")]
    PatternCompileError { pattern_id: String, message: String },
    #[error("pattern pack: {0}")]
    PatternPack(String),
    #[error("note {note_id} belongs to {found}, expected {expected}")]
    PatientMismatch { note_id: String, expected: EntityId, found: EntityId },
    #[error("note {0} has empty text")]
    EmptyNote(String),
    #[error(transparent)]
    Graph(#[from] KgError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderNote {
    pub note_id: String,
    pub patient_id: EntityId,
    pub text: String,
    pub authored_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    #[default]
    Entity,
    Number,
    String,
}

/// One triple to emit per match. Slots are `$patient`, `$<group>` or a
/// literal value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleTemplate {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    #[serde(default)]
    pub object_kind: ObjectKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionPattern {
    pub pattern_id: String,
    pub matcher: String,
    pub templates: Vec<TripleTemplate>,
    pub priority: u32,
}

/// A validated pattern with its regex compiled.
#[derive(Debug, Clone)]
pub struct CompiledPattern {
    pub spec: ExtractionPattern,
    regex: Regex,
}

impl CompiledPattern {
    pub fn compile(spec: ExtractionPattern) -> Result<Self, IngestError> {
        let err = |message: String| IngestError::PatternCompileError { pattern_id: spec.pattern_id.clone(), message };
        let regex = Regex::new(&spec.matcher).map_err(|e| err(e.to_string()))?;
        let groups: Vec<&str> = regex.capture_names().flatten().collect();
        for t in &spec.templates {
            for slot in [&t.subject, &t.object] {
                if let Some(name) = slot.strip_prefix('$') {
                    if slot != PATIENT_PLACEHOLDER && !groups.contains(&name) {
                        return Err(err(format!("placeholder {slot} names no capture group")));
                    }
                }
            }
            if !t.subject.starts_with('$') && t.subject.parse::<EntityId>().is_err() {
                return Err(err(format!("subject {:?} is neither a placeholder nor an entity id", t.subject)));
            }
            if t.predicate.is_empty() || t.predicate.starts_with('$') {
                return Err(err(format!("bad predicate {:?}", t.predicate)));
            }
        }
        Ok(CompiledPattern { spec, regex })
    }
}

/// Compiles and orders patterns by (priority, pattern_id).
pub fn compile_patterns(patterns: &[ExtractionPattern]) -> Result<Vec<CompiledPattern>, IngestError> {
    let mut out = patterns.iter().cloned().map(CompiledPattern::compile).collect::<Result<Vec<_>, _>>()?;
    out.sort_by(|a, b| a.spec.priority.cmp(&b.spec.priority).then_with(|| a.spec.pattern_id.cmp(&b.spec.pattern_id)));
    Ok(out)
}

/// Reads a pattern pack: a JSON array of extraction patterns.
pub fn parse_pattern_pack(json: &str) -> Result<Vec<ExtractionPattern>, IngestError> {
    serde_json::from_str(json).map_err(|e| IngestError::PatternPack(e.to_string()))
}

/// Lowercases, joins whitespace runs with `_` and places the result in the
/// `kb:` namespace.
pub fn normalize_entity(raw: &str) -> Option<EntityId> {
    let local = raw.split_whitespace().collect::<Vec<_>>().join("_").to_lowercase();
    EntityId::kb(&local).ok()
}

/// Source-agnostic extraction: `provenance` is called with each match span.
pub fn extract_from_text(
    text: &str,
    patient: &EntityId,
    patterns: &[CompiledPattern],
    provenance: impl Fn((usize, usize)) -> Provenance,
) -> Vec<Triple> {
    // (span start, pattern rank, template index) keeps the output order stable
    let mut keyed: Vec<((usize, usize, usize), Triple)> = Vec::new();
    for (rank, pat) in patterns.iter().enumerate() {
        for caps in pat.regex.captures_iter(text) {
            let whole = caps.get(0).expect("group 0 always matches");
            let span = (whole.start(), whole.end());
            let slot = |s: &str| -> Option<String> {
                match s.strip_prefix('$') {
                    Some(_) if s == PATIENT_PLACEHOLDER => Some(patient.to_string()),
                    Some(name) => caps.name(name).map(|m| m.as_str().to_string()).filter(|v| !v.trim().is_empty()),
                    None => Some(s.to_string()),
                }
            };
            for (ti, tpl) in pat.spec.templates.iter().enumerate() {
                let Some(triple) = instantiate(tpl, &slot, provenance(span)) else { continue };
                keyed.push(((span.0, rank, ti), triple));
            }
        }
    }
    keyed.sort_by_key(|(k, _)| *k);
    keyed.into_iter().map(|(_, t)| t).collect()
}

fn instantiate(tpl: &TripleTemplate, slot: &dyn Fn(&str) -> Option<String>, provenance: Provenance) -> Option<Triple> {
    let entity = |template: &str, value: String| -> Option<EntityId> {
        if template == PATIENT_PLACEHOLDER || !template.starts_with('$') {
            value.parse().ok()
        } else {
            normalize_entity(&value)
        }
    };
    let subject = entity(&tpl.subject, slot(&tpl.subject)?)?;
    let raw_object = slot(&tpl.object)?;
    let object = match tpl.object_kind {
        ObjectKind::Entity => Object::Entity(entity(&tpl.object, raw_object)?),
        ObjectKind::Number => {
            let value: f64 = raw_object.trim().parse().ok()?;
            Object::Literal(Literal::Number { value, unit: tpl.unit.clone() })
        }
        ObjectKind::String => Object::Literal(Literal::String { value: raw_object }),
    };
    let t = Triple::new(subject, tpl.predicate.clone(), object, 1.0, provenance);
    t.validate().ok()?;
    Some(t)
}

pub fn extract_triples(note: &ProviderNote, patterns: &[CompiledPattern]) -> Vec<Triple> {
    extract_from_text(&note.text, &note.patient_id, patterns, |span| Provenance::ProviderNote {
        note_id: note.note_id.clone(),
        span,
    })
}

/// Compiles `patterns` and extracts from a single note.
pub fn extract_triples_from(note: &ProviderNote, patterns: &[ExtractionPattern]) -> Result<Vec<Triple>, IngestError> {
    Ok(extract_triples(note, &compile_patterns(patterns)?))
}

/// Chat turns reuse the provider-note patterns with chat provenance.
pub fn extract_chat_triples(
    text: &str,
    patient: &EntityId,
    session_id: &str,
    message_id: &str,
    patterns: &[CompiledPattern],
) -> Vec<Triple> {
    extract_from_text(text, patient, patterns, |_| Provenance::ChatTurn {
        session_id: session_id.to_string(),
        message_id: message_id.to_string(),
    })
}

pub fn bootstrap_patient_kg(
    patient_id: &EntityId,
    notes: &[ProviderNote],
    patterns: &[ExtractionPattern],
) -> Result<KnowledgeGraph, IngestError> {
    let compiled = compile_patterns(patterns)?;
    let mut g = KnowledgeGraph::new(patient_id.to_string());
    for note in notes {
        check_note(patient_id, note)?;
        for t in extract_triples(note, &compiled) {
            g.add_triple(t)?;
        }
    }
    Ok(g)
}

pub fn check_note(patient_id: &EntityId, note: &ProviderNote) -> Result<(), IngestError> {
    if &note.patient_id != patient_id {
        return Err(IngestError::PatientMismatch {
            note_id: note.note_id.clone(),
            expected: patient_id.clone(),
            found: note.patient_id.clone(),
        });
    }
    if note.text.trim().is_empty() {
        return Err(IngestError::EmptyNote(note.note_id.clone()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    Week,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub activity: EntityId,
    pub target_count: u32,
    pub period: Period,
    pub source: Provenance,
}

/// Pairs `recommended_activity` with `frequency_per_week` triples. The most
/// recently added frequency wins; incomplete or malformed pairs become
/// warnings.
pub fn extract_recommendations(graph: &KnowledgeGraph, patient_id: &EntityId) -> (Vec<Recommendation>, Vec<String>) {
    let mut activities: BTreeMap<EntityId, Provenance> = BTreeMap::new();
    for t in graph.outgoing(patient_id).filter(|t| t.predicate == RECOMMENDED_ACTIVITY) {
        if let Object::Entity(a) = &t.object {
            activities.entry(a.clone()).or_insert_with(|| t.provenance.clone());
        }
    }
    let mut recs = Vec::new();
    let mut warnings = Vec::new();
    for (activity, source) in activities {
        let freq = graph
            .outgoing(&activity)
            .filter(|t| t.predicate == FREQUENCY_PER_WEEK)
            .filter_map(|t| t.object.as_literal().and_then(Literal::as_number))
            .last();
        match freq {
            None => warnings.push(format!("{activity}: recommendation without {FREQUENCY_PER_WEEK}")),
            Some(n) if n >= 1.0 && n.fract() == 0.0 && n <= f64::from(u32::MAX) => recs.push(Recommendation {
                activity,
                target_count: n as u32,
                period: Period::Week,
                source,
            }),
            Some(n) => warnings.push(format!("{activity}: frequency {n} is not a positive whole number")),
        }
    }
    (recs, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn p1() -> EntityId {
        EntityId::patient("p1").unwrap()
    }

    fn note(id: &str, text: &str) -> ProviderNote {
        ProviderNote {
            note_id: id.into(),
            patient_id: p1(),
            text: text.into(),
            authored_at: Utc.with_ymd_and_hms(2024, 1, 1, 9, 0, 0).unwrap(),
        }
    }

    fn takes_pattern() -> ExtractionPattern {
        serde_json::from_str(
            r#"{"pattern_id":"takes_dose","matcher":"Patient takes (?P<drug>\\w+) (?P<dose>\\d+)mg","priority":0,
                "templates":[{"subject":"$patient","predicate":"takes","object":"$drug"},
                             {"subject":"$drug","predicate":"dosage_mg","object":"$dose","object_kind":"number"}]}"#,
        )
        .unwrap()
    }

    fn rec_pattern() -> ExtractionPattern {
        serde_json::from_str(
            r#"{"pattern_id":"rec","matcher":"(?i)recommended (?P<activity>[a-z]+) (?P<n>\\d+) days per week","priority":1,
                "templates":[{"subject":"$patient","predicate":"recommended_activity","object":"$activity"},
                             {"subject":"$activity","predicate":"frequency_per_week","object":"$n","object_kind":"number"}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn takes_with_dose() {
        let n = note("n1", "Patient takes sertraline 50mg daily");
        let out = extract_triples_from(&n, &[takes_pattern()]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].subject, p1());
        assert_eq!(out[0].predicate, "takes");
        assert_eq!(out[0].object, Object::Entity("kb:sertraline".parse().unwrap()));
        assert_eq!(out[1].subject, "kb:sertraline".parse().unwrap());
        assert_eq!(out[1].object, Object::Literal(Literal::number(50.0)));
        for t in &out {
            assert_eq!(t.confidence, 1.0);
            let Provenance::ProviderNote { span: (s, e), .. } = t.provenance else { panic!() };
            assert_eq!(&n.text[s..e], "Patient takes sertraline 50mg");
        }
    }

    #[test]
    fn no_patterns_no_triples() {
        assert!(extract_triples_from(&note("n1", "Patient takes x 5mg"), &[]).unwrap().is_empty());
    }

    #[test]
    fn weekly_recommendation() {
        let out = extract_triples_from(&note("n1", "Recommended exercise 5 days per week"), &[rec_pattern()]).unwrap();
        assert_eq!(out[0].to_tsv().split('\t').take(3).collect::<Vec<_>>(), ["patient:p1", "recommended_activity", "kb:exercise"]);
        assert_eq!(out[1].to_tsv().split('\t').take(3).collect::<Vec<_>>(), ["kb:exercise", "frequency_per_week", "5"]);
    }

    #[test]
    fn bad_patterns_are_named() {
        let mut p = takes_pattern();
        p.matcher = "(unclosed".into();
        assert!(matches!(compile_patterns(&[p]), Err(IngestError::PatternCompileError { pattern_id, .. }) if pattern_id == "takes_dose"));
        let mut p = takes_pattern();
        p.templates[0].object = "$nope".into();
        assert!(compile_patterns(&[p]).is_err());
    }

    #[test]
    fn output_ordered_by_span_then_priority() {
        let n = note("n1", "Recommended walking 3 days per week. Patient takes lithium 300mg.");
        let out = extract_triples_from(&n, &[takes_pattern(), rec_pattern()]).unwrap();
        let preds: Vec<&str> = out.iter().map(|t| t.predicate.as_str()).collect();
        assert_eq!(preds, ["recommended_activity", "frequency_per_week", "takes", "dosage_mg"]);
    }

    #[test]
    fn multi_word_captures_normalize() {
        assert_eq!(normalize_entity("Dry  Mouth").unwrap().as_str(), "kb:dry_mouth");
        assert!(normalize_entity("   ").is_none());
    }

    #[test]
    fn bootstrap_unions_notes() {
        let pats = [takes_pattern(), rec_pattern()];
        assert!(bootstrap_patient_kg(&p1(), &[], &pats).unwrap().is_empty());
        let a = note("n1", "Patient takes sertraline 50mg");
        let b = note("n2", "Recommended exercise 5 days per week");
        let g = bootstrap_patient_kg(&p1(), &[a.clone(), b], &pats).unwrap();
        assert_eq!(g.len(), 4);
        let twice = bootstrap_patient_kg(&p1(), &[a.clone(), note("n3", &a.text)], &pats).unwrap();
        assert_eq!(twice.len(), 4);

        let mut stranger = a;
        stranger.patient_id = EntityId::patient("p2").unwrap();
        assert!(matches!(bootstrap_patient_kg(&p1(), &[stranger], &pats), Err(IngestError::PatientMismatch { .. })));
    }

    #[test]
    fn recommendations_from_graph() {
        let g = bootstrap_patient_kg(&p1(), &[note("n1", "Recommended exercise 5 days per week")], &[rec_pattern()]).unwrap();
        let (recs, warnings) = extract_recommendations(&g, &p1());
        assert!(warnings.is_empty());
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].activity.as_str(), "kb:exercise");
        assert_eq!(recs[0].target_count, 5);
        assert_eq!(recs[0].period, Period::Week);

        let (recs, warnings) = extract_recommendations(&KnowledgeGraph::new("x"), &p1());
        assert!(recs.is_empty() && warnings.is_empty());
    }

    #[test]
    fn recommendation_without_frequency_warns() {
        let mut g = KnowledgeGraph::new("p1");
        g.add_triple(Triple::new(
            p1(),
            RECOMMENDED_ACTIVITY,
            EntityId::kb("exercise").unwrap(),
            1.0,
            Provenance::ProviderNote { note_id: "n".into(), span: (0, 3) },
        ))
        .unwrap();
        let (recs, warnings) = extract_recommendations(&g, &p1());
        assert!(recs.is_empty());
        assert_eq!(warnings.len(), 1);
    }
}
