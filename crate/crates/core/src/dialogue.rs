//! Session state machine: screening first, then intent handling, safety
//! gating and policy selection over template candidates.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::{DateTime, NaiveDate, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{extract_recommendations, Recommendation, RECOMMENDED_ACTIVITY};
use crate::kg::{EntityId, KgError, KnowledgeGraph, Literal, Path, PredicatePattern, MAX_PATH_LEN, SAME_AS};
use crate::link::{embed, fnv1a64, DEFAULT_LINK_THRESHOLD};
use crate::policy::{
    explain_selection, select_response, AdherenceBucket, EscalationBucket, MaskedTemplate, PolicyState,
    ResponsePolicy, SelectionExplanation,
};
use crate::safety::{check_action, ActionType, Bindings, PathConstraint, PATIENT_VAR};
use crate::screeners::{
    advance, match_concepts, Alert, Escalation, QuestionnaireTree, Thresholds, TreeState, DEFAULT_MATCH_THRESHOLD,
};

pub const TAKES: &str = "takes";
pub const HAS_SIDE_EFFECT: &str = "has_side_effect";
pub const DOSAGE_MG: &str = "dosage_mg";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DialogueError {
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error("lexicon: {0}")]
    Lexicon(String),
    #[error("template table: {0}")]
    Templates(String),
    #[error(transparent)]
    Graph(#[from] KgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentKind {
    MedicationQuery,
    SymptomReport,
    AdherenceCheckin,
    Feedback,
    Other,
}

impl IntentKind {
    pub const ALL: [IntentKind; 5] = [
        IntentKind::MedicationQuery,
        IntentKind::SymptomReport,
        IntentKind::AdherenceCheckin,
        IntentKind::Feedback,
        IntentKind::Other,
    ];

    pub fn slot_names(self) -> &'static [&'static str] {
        match self {
            IntentKind::MedicationQuery => &["drug"],
            IntentKind::SymptomReport => &["symptom"],
            IntentKind::AdherenceCheckin => &["activity", "count"],
            IntentKind::Feedback => &["signal"],
            IntentKind::Other => &[],
        }
    }
}

impl fmt::Display for IntentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("intent encodes");
        f.write_str(v.as_str().expect("unit variant"))
    }
}

impl FromStr for IntentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown intent {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub kind: IntentKind,
    pub slots: BTreeMap<String, String>,
}

impl Intent {
    pub fn other() -> Self {
        Intent { kind: IntentKind::Other, slots: BTreeMap::new() }
    }

    pub fn slot(&self, name: &str) -> Option<&str> {
        self.slots.get(name).map(String::as_str)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LexiconFile {
    intents: Vec<IntentRule>,
    #[serde(default)]
    slot_values: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    numbers: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IntentRule {
    kind: IntentKind,
    patterns: Vec<String>,
}

/// Ordered intent patterns plus slot normalization tables.
#[derive(Debug, Clone)]
pub struct IntentLexicon {
    rules: Vec<(IntentKind, Vec<Regex>)>,
    slot_values: BTreeMap<String, BTreeMap<String, String>>,
    numbers: BTreeMap<String, u32>,
}

impl IntentLexicon {
    pub fn from_json(json: &str) -> Result<Self, DialogueError> {
        let file: LexiconFile = serde_json::from_str(json).map_err(|e| DialogueError::Lexicon(e.to_string()))?;
        let mut rules = Vec::new();
        for r in file.intents {
            let mut compiled = Vec::new();
            for p in &r.patterns {
                let re = Regex::new(p).map_err(|e| DialogueError::Lexicon(format!("{}: {e}", r.kind)))?;
                for name in re.capture_names().flatten() {
                    if !r.kind.slot_names().contains(&name) {
                        return Err(DialogueError::Lexicon(format!("{}: slot {name:?} not allowed", r.kind)));
                    }
                }
                compiled.push(re);
            }
            rules.push((r.kind, compiled));
        }
        Ok(IntentLexicon { rules, slot_values: file.slot_values, numbers: file.numbers })
    }

    fn normalize(&self, slot: &str, raw: &str) -> String {
        let raw = raw.trim().to_lowercase();
        if slot == "count" {
            if let Some(n) = self.numbers.get(&raw) {
                return n.to_string();
            }
        }
        self.slot_values.get(slot).and_then(|m| m.get(&raw)).cloned().unwrap_or(raw)
    }
}

/// First matching lexicon pattern wins; nothing matches means `other`.
pub fn classify_intent(utterance: &str, lexicon: &IntentLexicon) -> Intent {
    let text = utterance.to_lowercase();
    for (kind, patterns) in &lexicon.rules {
        for re in patterns {
            if let Some(caps) = re.captures(&text) {
                let slots = re
                    .capture_names()
                    .flatten()
                    .filter_map(|name| caps.name(name).map(|m| (name.to_string(), lexicon.normalize(name, m.as_str()))))
                    .filter(|(_, v)| !v.is_empty())
                    .collect();
                return Intent { kind: *kind, slots };
            }
        }
    }
    Intent::other()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTemplate {
    pub template_id: String,
    pub action_type: ActionType,
    /// `None` for templates not tied to an intent (emergency, clarify).
    pub intent: Option<IntentKind>,
    pub text: String,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("static regex"))
}

impl ResponseTemplate {
    /// Fills every `{slot}`; `None` if any slot has no value.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Option<String> {
        let mut missing = false;
        let out = placeholder_re().replace_all(&self.text, |c: &regex::Captures<'_>| match values.get(&c[1]) {
            Some(v) => v.clone(),
            None => {
                missing = true;
                String::new()
            }
        });
        (!missing).then(|| out.into_owned())
    }
}

#[derive(Debug, Clone)]
pub struct TemplateTable {
    templates: Vec<ResponseTemplate>,
}

impl TemplateTable {
    pub fn from_json(json: &str) -> Result<Self, DialogueError> {
        let mut templates: Vec<ResponseTemplate> =
            serde_json::from_str(json).map_err(|e| DialogueError::Templates(e.to_string()))?;
        templates.sort_by(|a, b| a.template_id.cmp(&b.template_id));
        for w in templates.windows(2) {
            if w[0].template_id == w[1].template_id {
                return Err(DialogueError::Templates(format!("duplicate template id {}", w[0].template_id)));
            }
        }
        for required in [ActionType::EmergencyAlert, ActionType::Clarify] {
            if !templates.iter().any(|t| t.action_type == required) {
                return Err(DialogueError::Templates(format!("no {required} template")));
            }
        }
        Ok(TemplateTable { templates })
    }

    pub fn all(&self) -> &[ResponseTemplate] {
        &self.templates
    }

    /// Templates for an intent and action, sorted by id.
    pub fn matching(&self, intent: IntentKind, action: ActionType) -> impl Iterator<Item = &ResponseTemplate> {
        self.templates.iter().filter(move |t| t.intent == Some(intent) && t.action_type == action)
    }

    pub fn first_of(&self, action: ActionType) -> &ResponseTemplate {
        self.templates.iter().find(|t| t.action_type == action).expect("checked at load")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCandidate {
    pub template_id: String,
    pub action_type: ActionType,
    pub text: String,
    pub bindings: Bindings,
    /// Paths from the verdict that approved the candidate.
    pub evidence: Vec<Path>,
    /// Paths that motivated the candidate, such as a hypothesis chain.
    #[serde(default)]
    pub support: Vec<Path>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub cause: EntityId,
    pub effect: EntityId,
    pub support: Path,
    /// (path length, negated product of edge confidences)
    pub rank_key: (usize, f64),
}

/// Medication → side-effect chains explaining `symptom`: `takes`, then any
/// number of `same_as` bridges, then `has_side_effect`.
pub fn hypothesize(
    symptom: &EntityId,
    patient: &EntityId,
    graph: &KnowledgeGraph,
    max_len: usize,
) -> Result<Vec<Hypothesis>, KgError> {
    if !graph.contains_entity(symptom) {
        return Err(KgError::UnknownEntity(symptom.clone()));
    }
    if !graph.contains_entity(patient) {
        return Ok(Vec::new());
    }
    let max_len = max_len.clamp(2, MAX_PATH_LEN);
    let mut out = Vec::new();
    for bridges in 0..=max_len - 2 {
        let mut pattern = vec![PredicatePattern::exact(TAKES)];
        pattern.extend(std::iter::repeat_n(PredicatePattern::exact(SAME_AS), bridges));
        pattern.push(PredicatePattern::exact(HAS_SIDE_EFFECT));
        for support in graph.find_paths(patient, &pattern, Some(symptom), max_len)? {
            out.push(Hypothesis {
                cause: support.nodes[1].clone(),
                effect: symptom.clone(),
                rank_key: (support.len(), -support.confidence_product()),
                support,
            });
        }
    }
    out.sort_by(|a, b| {
        a.rank_key
            .0
            .cmp(&b.rank_key.0)
            .then(a.rank_key.1.total_cmp(&b.rank_key.1))
            .then_with(|| a.cause.cmp(&b.cause))
            .then_with(|| a.support.nodes.cmp(&b.support.nodes))
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Patient,
    Bot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BotTurnMeta {
    pub template_id: String,
    pub action_type: ActionType,
    pub bindings: Bindings,
    pub fallback: bool,
    pub intent: Intent,
    pub policy_state: Option<PolicyState>,
    pub explanation: Vec<Path>,
    pub selection: Option<SelectionExplanation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub message_id: String,
    pub speaker: Speaker,
    pub text: String,
    pub at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<BotTurnMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityReport {
    pub activity: EntityId,
    pub count: u32,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSession {
    pub session_id: String,
    pub patient_id: EntityId,
    pub turn_log: Vec<Turn>,
    pub tree_state: TreeState,
    pub activity_log: Vec<ActivityReport>,
    pub closed: bool,
    next_message: u64,
}

impl DialogueSession {
    pub fn new(session_id: &str, patient_id: EntityId, tree_id: &str) -> Self {
        DialogueSession {
            session_id: session_id.to_string(),
            patient_id,
            turn_log: Vec::new(),
            tree_state: TreeState::new(tree_id, session_id),
            activity_log: Vec::new(),
            closed: false,
            next_message: 1,
        }
    }

    pub fn next_message_id(&mut self) -> String {
        let id = format!("m{:06}", self.next_message);
        self.next_message += 1;
        id
    }

    pub fn turn(&self, message_id: &str) -> Option<&Turn> {
        self.turn_log.iter().find(|t| t.message_id == message_id)
    }

    /// Rebuilds the id counter after restoring turns from storage.
    pub fn resync_counter(&mut self) {
        self.next_message = self.turn_log.len() as u64 + 1;
    }

    pub fn adherence_bucket(&self, recs: &[Recommendation]) -> AdherenceBucket {
        let Some(last) = self.activity_log.last() else { return AdherenceBucket::Unknown };
        match recs.iter().find(|r| r.activity == last.activity) {
            Some(r) if last.count >= r.target_count => AdherenceBucket::OnTrack,
            Some(_) => AdherenceBucket::Behind,
            None => AdherenceBucket::Unknown,
        }
    }
}

/// Praise when the reported count meets the target, encouragement with the
/// remaining count otherwise.
pub fn appraise_adherence(
    session: &DialogueSession,
    rec: &Recommendation,
    reported_count: u32,
    graph: &KnowledgeGraph,
    templates: &TemplateTable,
) -> Option<ResponseCandidate> {
    adherence_candidates(session, rec, reported_count, graph, templates).into_iter().next()
}

fn adherence_candidates(
    session: &DialogueSession,
    rec: &Recommendation,
    reported_count: u32,
    graph: &KnowledgeGraph,
    templates: &TemplateTable,
) -> Vec<ResponseCandidate> {
    let action = if reported_count >= rec.target_count {
        ActionType::AdherencePraise
    } else {
        ActionType::AdherenceEncourage
    };
    let mut values = BTreeMap::new();
    values.insert("activity", rec.activity.label());
    values.insert("count", reported_count.to_string());
    values.insert("target", rec.target_count.to_string());
    values.insert("remaining", rec.target_count.saturating_sub(reported_count).to_string());
    let evidence: Vec<Path> = graph
        .outgoing(&session.patient_id)
        .filter(|t| t.predicate == RECOMMENDED_ACTIVITY && t.object.as_entity() == Some(&rec.activity))
        .take(1)
        .map(|t| Path { nodes: vec![session.patient_id.clone(), rec.activity.clone()], edges: vec![t.clone()] })
        .collect();
    let mut bindings = patient_bindings(&session.patient_id);
    bindings.insert("?activity".into(), rec.activity.clone());
    templates
        .matching(IntentKind::AdherenceCheckin, action)
        .filter_map(|t| {
            Some(ResponseCandidate {
                template_id: t.template_id.clone(),
                action_type: action,
                text: t.render(&values)?,
                bindings: bindings.clone(),
                evidence: evidence.clone(),
                support: Vec::new(),
            })
        })
        .collect()
}

fn patient_bindings(patient: &EntityId) -> Bindings {
    let mut b = Bindings::new();
    b.insert(PATIENT_VAR.into(), patient.clone());
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DialogueConfig {
    pub link_threshold: f64,
    pub match_threshold: f64,
    pub thresholds: Thresholds,
    pub seed: u64,
    pub hypothesis_max_len: usize,
}

impl Default for DialogueConfig {
    fn default() -> Self {
        DialogueConfig {
            link_threshold: DEFAULT_LINK_THRESHOLD,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            thresholds: Thresholds::default(),
            seed: 0,
            hypothesis_max_len: 4,
        }
    }
}

/// Read-only inputs shared by every step.
pub struct StepContext<'a> {
    /// Patient graph composed with the linked knowledge bases.
    pub graph: &'a KnowledgeGraph,
    pub constraints: &'a [PathConstraint],
    pub tree: &'a QuestionnaireTree,
    pub policy: &'a ResponsePolicy,
    pub templates: &'a TemplateTable,
    pub lexicon: &'a IntentLexicon,
    pub config: DialogueConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub patient_message_id: String,
    pub reply_message_id: String,
    pub reply: ResponseCandidate,
    pub alerts: Vec<Alert>,
    pub explanation: Vec<Path>,
    pub intent: Intent,
    pub fallback: bool,
    pub policy_state: Option<PolicyState>,
    pub selection: Option<SelectionExplanation>,
}

/// Entity among `candidates` whose label best matches `text`, if it clears
/// `threshold`. Ties go to the smaller id.
fn best_label_match<'a>(text: &str, candidates: impl IntoIterator<Item = &'a EntityId>, threshold: f64) -> Option<EntityId> {
    let v = embed(text);
    let mut scored: Vec<(f64, &EntityId)> = candidates.into_iter().map(|e| (v.cosine(&embed(&e.label())), e)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().find(|(s, _)| *s >= threshold).map(|(_, e)| e.clone())
}

fn step_seed(seed: u64, session_id: &str, message_id: &str) -> u64 {
    fnv1a64(format!("{seed}:{session_id}:{message_id}").as_bytes())
}

fn render_all(
    templates: &TemplateTable,
    intent: IntentKind,
    action: ActionType,
    values: &BTreeMap<&str, String>,
    bindings: &Bindings,
    support: &[Path],
) -> Vec<ResponseCandidate> {
    templates
        .matching(intent, action)
        .filter_map(|t| {
            Some(ResponseCandidate {
                template_id: t.template_id.clone(),
                action_type: action,
                text: t.render(values)?,
                bindings: bindings.clone(),
                evidence: Vec::new(),
                support: support.to_vec(),
            })
        })
        .collect()
}

/// Template candidates for an intent, before safety filtering.
pub fn build_candidates(
    session: &mut DialogueSession,
    intent: &Intent,
    ctx: &StepContext<'_>,
    today: NaiveDate,
) -> Vec<ResponseCandidate> {
    let patient = session.patient_id.clone();
    let graph = ctx.graph;
    let threshold = ctx.config.link_threshold;
    let mut bindings = patient_bindings(&patient);
    let mut values: BTreeMap<&str, String> = BTreeMap::new();
    match intent.kind {
        IntentKind::MedicationQuery => {
            let Some(slot) = intent.slot("drug") else {
                return Vec::new();
            };
            let taken: Vec<EntityId> = graph
                .outgoing(&patient)
                .filter(|t| t.predicate == TAKES)
                .filter_map(|t| t.object.as_entity().cloned())
                .collect();
            let drug = best_label_match(slot, &taken, threshold).or_else(|| crate::ingest::normalize_entity(slot));
            let Some(drug) = drug else { return Vec::new() };
            values.insert("drug", drug.label());
            if let Some(dose) = graph
                .outgoing(&drug)
                .filter(|t| t.predicate == DOSAGE_MG)
                .filter_map(|t| t.object.as_literal().and_then(Literal::as_number))
                .last()
            {
                values.insert("dose", dose.to_string());
            }
            bindings.insert("?drug".into(), drug);
            render_all(ctx.templates, intent.kind, ActionType::MedicationAdvice, &values, &bindings, &[])
        }
        IntentKind::SymptomReport => {
            let Some(slot) = intent.slot("symptom") else {
                return Vec::new();
            };
            values.insert("symptom", slot.to_string());
            let effects: Vec<EntityId> = graph
                .triples()
                .iter()
                .filter(|t| t.predicate == HAS_SIDE_EFFECT)
                .filter_map(|t| t.object.as_entity().cloned())
                .collect();
            let hypotheses = best_label_match(slot, &effects, threshold)
                .map(|symptom| hypothesize(&symptom, &patient, graph, ctx.config.hypothesis_max_len).unwrap_or_default())
                .unwrap_or_default();
            match hypotheses.first() {
                Some(h) => {
                    values.insert("cause", h.cause.label());
                    values.insert("symptom", h.effect.label());
                    bindings.insert("?drug".into(), h.cause.clone());
                    bindings.insert("?symptom".into(), h.effect.clone());
                    render_all(
                        ctx.templates,
                        intent.kind,
                        ActionType::HypothesisOffer,
                        &values,
                        &bindings,
                        std::slice::from_ref(&h.support),
                    )
                }
                None => render_all(ctx.templates, intent.kind, ActionType::Smalltalk, &values, &bindings, &[]),
            }
        }
        IntentKind::AdherenceCheckin => {
            let (recs, _) = extract_recommendations(graph, &patient);
            let count = intent.slot("count").and_then(|c| c.parse::<u32>().ok());
            let activity = intent.slot("activity").unwrap_or_default();
            let rec = best_label_match(activity, recs.iter().map(|r| &r.activity), threshold)
                .and_then(|a| recs.iter().find(|r| r.activity == a));
            match (rec, count) {
                (Some(rec), Some(count)) => {
                    session.activity_log.push(ActivityReport { activity: rec.activity.clone(), count, date: today });
                    adherence_candidates(session, rec, count, graph, ctx.templates)
                }
                _ => {
                    values.insert("activity", activity.to_string());
                    render_all(ctx.templates, intent.kind, ActionType::Smalltalk, &values, &bindings, &[])
                }
            }
        }
        IntentKind::Feedback | IntentKind::Other => {
            render_all(ctx.templates, intent.kind, ActionType::Smalltalk, &values, &bindings, &[])
        }
    }
}

fn fixed_reply(template: &crate::dialogue::ResponseTemplate, patient: &EntityId) -> ResponseCandidate {
    ResponseCandidate {
        template_id: template.template_id.clone(),
        action_type: template.action_type,
        text: template.render(&BTreeMap::new()).unwrap_or_else(|| template.text.clone()),
        bindings: patient_bindings(patient),
        evidence: Vec::new(),
        support: Vec::new(),
    }
}

/// Processes one patient utterance.
pub fn step(
    session: &mut DialogueSession,
    utterance: &str,
    ctx: &StepContext<'_>,
    now: DateTime<Utc>,
) -> Result<StepOutcome, DialogueError> {
    if session.closed {
        return Err(DialogueError::SessionClosed(session.session_id.clone()));
    }
    let patient_message_id = session.next_message_id();
    session.turn_log.push(Turn {
        message_id: patient_message_id.clone(),
        speaker: Speaker::Patient,
        text: utterance.to_string(),
        at: now,
        meta: None,
    });

    // 1. screening always runs first
    let matches = match_concepts(utterance, ctx.tree, ctx.config.match_threshold).unwrap_or_default();
    let before = session.tree_state.escalation;
    let (tree_state, alert) = advance(&session.tree_state, ctx.tree, &matches, &patient_message_id, ctx.config.thresholds, now)
        .expect("matches come from the same tree");
    session.tree_state = tree_state;
    let alerts: Vec<Alert> = alert.into_iter().collect();
    let emergency = session.tree_state.escalation == Escalation::Emergency && before != Escalation::Emergency;

    let patient = session.patient_id.clone();
    let intent;
    let mut policy_state = None;
    let mut selection = None;
    let mut fallback = false;
    let reply = if emergency {
        // 2. escalation overrides intent handling
        intent = Intent::other();
        fixed_reply(ctx.templates.first_of(ActionType::EmergencyAlert), &patient)
    } else {
        // 3. intent and candidates
        intent = classify_intent(utterance, ctx.lexicon);
        let candidates = build_candidates(session, &intent, ctx, now.date_naive());
        // 4. safety mask
        let mut survivors = Vec::new();
        let mut masked = Vec::new();
        for mut c in candidates {
            match check_action(c.action_type, &c.bindings, ctx.graph, ctx.constraints) {
                Ok(v) if v.is_allowed() => {
                    c.evidence = v.paths();
                    survivors.push(c);
                }
                Ok(v) => masked.push(MaskedTemplate {
                    template_id: c.template_id,
                    violated: v.violated.unwrap_or_default(),
                }),
                Err(e) => masked.push(MaskedTemplate { template_id: c.template_id, violated: e.to_string() }),
            }
        }
        // 5. policy choice among survivors
        let (recs, _) = extract_recommendations(ctx.graph, &patient);
        let state = PolicyState {
            intent: intent.kind,
            escalation: match session.tree_state.escalation {
                Escalation::None => EscalationBucket::None,
                _ => EscalationBucket::Flagged,
            },
            adherence: session.adherence_bucket(&recs),
        };
        let reply_id_preview = format!("m{:06}", session.next_message);
        let seed = step_seed(ctx.config.seed, &session.session_id, &reply_id_preview);
        match select_response(state, &survivors, ctx.policy, seed) {
            Ok((chosen, sel)) => {
                policy_state = Some(state);
                selection = Some(explain_selection(state, &chosen.template_id, sel, ctx.policy, &survivors, &masked));
                chosen.clone()
            }
            // 6. fail closed
            Err(_) => {
                fallback = true;
                fixed_reply(ctx.templates.first_of(ActionType::Clarify), &patient)
            }
        }
    };

    let explanation: Vec<Path> = reply.support.iter().chain(&reply.evidence).cloned().collect();
    let reply_message_id = session.next_message_id();
    session.turn_log.push(Turn {
        message_id: reply_message_id.clone(),
        speaker: Speaker::Bot,
        text: reply.text.clone(),
        at: now,
        meta: Some(BotTurnMeta {
            template_id: reply.template_id.clone(),
            action_type: reply.action_type,
            bindings: reply.bindings.clone(),
            fallback,
            intent: intent.clone(),
            policy_state,
            explanation: explanation.clone(),
            selection: selection.clone(),
        }),
    });
    Ok(StepOutcome {
        patient_message_id,
        reply_message_id,
        reply,
        alerts,
        explanation,
        intent,
        fallback,
        policy_state,
        selection,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditFinding {
    pub message_id: String,
    pub problem: String,
}

/// Re-derives the safety verdict for every policy-selected reply and checks
/// that explanation paths replay against `graph`.
pub fn audit_session(session: &DialogueSession, graph: &KnowledgeGraph, constraints: &[PathConstraint]) -> Vec<AuditFinding> {
    let mut out = Vec::new();
    for turn in &session.turn_log {
        let Some(meta) = &turn.meta else { continue };
        let finding = |problem: String| AuditFinding { message_id: turn.message_id.clone(), problem };
        for p in &meta.explanation {
            if !p.is_well_formed() || !p.edges.iter().all(|e| graph.contains(e)) {
                out.push(finding(format!("explanation path does not replay: {p}")));
            }
        }
        if meta.fallback || meta.action_type == ActionType::EmergencyAlert {
            continue;
        }
        match check_action(meta.action_type, &meta.bindings, graph, constraints) {
            Ok(v) if v.is_allowed() => {}
            Ok(v) => out.push(finding(format!("verdict now denied by {}", v.violated.unwrap_or_default()))),
            Err(e) => out.push(finding(e.to_string())),
        }
    }
    out
}
