//! Thread-safe engine holding patient graphs, sessions, alerts and the
//! response policy. Every mutation is reported to an [`EventSink`] as one
//! batch before it becomes visible, and [`Engine::apply`] rebuilds the same
//! state from those events.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{step, ActivityReport, DialogueConfig, DialogueSession, Speaker, StepContext, StepOutcome, Turn};
use crate::ingest::{check_note, extract_chat_triples, extract_triples, ProviderNote};
use crate::kg::{EntityId, KnowledgeGraph, Namespace, Object, Provenance, Triple, SAME_AS};
use crate::link::{keeps_patient_values, link_entities, resolve_conflicts, EntityLink, LinkStatus};
use crate::policy::{Cell, FeedbackEvent, FeedbackSource, PolicyState, ResponsePolicy, SelectionExplanation, Signal};
use crate::resources::Resources;
use crate::safety::ActionType;
use crate::screeners::{Alert, TreeState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EngineEvent {
    NoteIngested { patient_id: EntityId, note_id: String, authored_at: DateTime<Utc>, text: String },
    TripleAdded { patient_id: EntityId, triple: Triple },
    LinkResolved { patient_id: EntityId, link: EntityLink },
    SessionOpened { session_id: String, patient_id: EntityId, at: DateTime<Utc> },
    MessageIn { session_id: String, turn: Turn },
    MessageOut { session_id: String, turn: Turn, tree_state: TreeState, activity_log: Vec<ActivityReport> },
    AlertRaised { alert_seq: u64, alert: Alert },
    AlertAcknowledged { alert_id: String, at: DateTime<Utc> },
    FeedbackReceived { feedback: FeedbackEvent, at: DateTime<Utc> },
    PolicyUpdated { state: PolicyState, template_id: String, value: f64, count: u64 },
}

impl EngineEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            EngineEvent::NoteIngested { .. } => "NoteIngested",
            EngineEvent::TripleAdded { .. } => "TripleAdded",
            EngineEvent::LinkResolved { .. } => "LinkResolved",
            EngineEvent::SessionOpened { .. } => "SessionOpened",
            EngineEvent::MessageIn { .. } => "MessageIn",
            EngineEvent::MessageOut { .. } => "MessageOut",
            EngineEvent::AlertRaised { .. } => "AlertRaised",
            EngineEvent::AlertAcknowledged { .. } => "AlertAcknowledged",
            EngineEvent::FeedbackReceived { .. } => "FeedbackReceived",
            EngineEvent::PolicyUpdated { .. } => "PolicyUpdated",
        }
    }
}

pub trait EventSink: Send + Sync {
    /// Persists one batch. The engine discards the mutation on error.
    fn record(&self, batch: &[EngineEvent]) -> Result<(), String>;
}

pub struct NullSink;

impl EventSink for NullSink {
    fn record(&self, _: &[EngineEvent]) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Default)]
pub struct MemorySink {
    batches: Mutex<Vec<Vec<EngineEvent>>>,
}

impl MemorySink {
    pub fn events(&self) -> Vec<EngineEvent> {
        self.batches.lock().unwrap().iter().flatten().cloned().collect()
    }

    pub fn batches(&self) -> Vec<Vec<EngineEvent>> {
        self.batches.lock().unwrap().clone()
    }
}

impl EventSink for MemorySink {
    fn record(&self, batch: &[EngineEvent]) -> Result<(), String> {
        self.batches.lock().unwrap().push(batch.to_vec());
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown patient {0}")]
    UnknownPatient(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown message {0}")]
    UnknownMessage(String),
    #[error("unknown alert {0}")]
    UnknownAlert(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Validation(String),
    #[error("event log: {0}")]
    Sink(String),
    #[error("replay: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub dialogue: DialogueConfig,
    pub epsilon: f64,
    pub alpha: f64,
    pub clinician_weight: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            dialogue: DialogueConfig::default(),
            epsilon: crate::policy::DEFAULT_EPSILON,
            alpha: crate::policy::DEFAULT_ALPHA,
            clinician_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct PatientRecord {
    graph: KnowledgeGraph,
    /// Patient graph composed with the knowledge bases.
    view: KnowledgeGraph,
    notes: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub alert: Alert,
    pub acknowledged_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub patient_id: EntityId,
    pub note_id: String,
    pub triples: Vec<Triple>,
    pub links: Vec<EntityLink>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub q_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnExplanation {
    pub message_id: String,
    pub template_id: String,
    pub action_type: ActionType,
    pub fallback: bool,
    pub paths: Vec<String>,
    pub selection: Option<SelectionExplanation>,
}

pub struct Engine {
    resources: Arc<Resources>,
    config: EngineConfig,
    patients: RwLock<BTreeMap<EntityId, Arc<RwLock<PatientRecord>>>>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<DialogueSession>>>>,
    alerts: RwLock<Vec<AlertRecord>>,
    policy: RwLock<ResponsePolicy>,
    feedback_seen: Mutex<BTreeSet<(String, String, FeedbackSource)>>,
    session_counter: AtomicU64,
    policy_updates: AtomicU64,
}

/// Drops knowledge-base literals that contradict a literal the patient
/// graph holds for a linked entity.
pub fn compose_view(patient: &KnowledgeGraph, kbs: &[KnowledgeGraph], keep_patient_values: bool) -> KnowledgeGraph {
    if !keep_patient_values {
        return KnowledgeGraph::compose(patient.graph_id(), std::iter::once(patient).chain(kbs));
    }
    let mut patient_literals: HashMap<(&EntityId, &str), Vec<String>> = HashMap::new();
    for t in patient.triples() {
        if let Object::Literal(l) = &t.object {
            patient_literals.entry((&t.subject, t.predicate.as_str())).or_default().push(Object::Literal(l.clone()).to_token());
        }
    }
    let mut linked_from: HashMap<&EntityId, Vec<&EntityId>> = HashMap::new();
    for t in patient.triples().iter().filter(|t| t.predicate == SAME_AS) {
        if let Object::Entity(target) = &t.object {
            linked_from.entry(target).or_default().push(&t.subject);
        }
    }
    let mut view = patient.clone();
    for kb in kbs {
        for t in kb.triples() {
            if let Object::Literal(_) = &t.object {
                let token = t.object.to_token();
                let shadowed = linked_from.get(&t.subject).is_some_and(|sources| {
                    sources.iter().any(|s| {
                        patient_literals
                            .get(&(*s, t.predicate.as_str()))
                            .is_some_and(|vals| !vals.contains(&token))
                    })
                });
                if shadowed {
                    continue;
                }
            }
            view.add_triple(t.clone()).expect("validated on load");
        }
    }
    view
}

fn patient_key(id: &EntityId) -> Result<(), EngineError> {
    if id.namespace() != Namespace::Patient {
        return Err(EngineError::Validation(format!("{id} is not a patient id")));
    }
    Ok(())
}

fn sink_err(e: String) -> EngineError {
    EngineError::Sink(e)
}

impl Engine {
    pub fn new(resources: Arc<Resources>, config: EngineConfig) -> Result<Self, EngineError> {
        let policy = ResponsePolicy::new(config.epsilon, config.alpha)
            .and_then(|p| p.with_clinician_weight(config.clinician_weight))
            .map_err(|e| EngineError::Validation(e.to_string()))?;
        Ok(Engine {
            resources,
            config,
            patients: RwLock::new(BTreeMap::new()),
            sessions: RwLock::new(BTreeMap::new()),
            alerts: RwLock::new(Vec::new()),
            policy: RwLock::new(policy),
            feedback_seen: Mutex::new(BTreeSet::new()),
            session_counter: AtomicU64::new(0),
            policy_updates: AtomicU64::new(0),
        })
    }

    pub fn resources(&self) -> &Resources {
        &self.resources
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    fn empty_record(&self, patient_id: &EntityId) -> PatientRecord {
        let graph = KnowledgeGraph::new(patient_id.to_string());
        let view = self.view_of(&graph);
        PatientRecord { graph, view, notes: BTreeSet::new() }
    }

    fn view_of(&self, graph: &KnowledgeGraph) -> KnowledgeGraph {
        compose_view(graph, &self.resources.kbs, keeps_patient_values(&self.resources.guidelines))
    }

    fn patient(&self, id: &EntityId) -> Option<Arc<RwLock<PatientRecord>>> {
        self.patients.read().unwrap().get(id).cloned()
    }

    fn session_handle(&self, id: &str) -> Result<Arc<Mutex<DialogueSession>>, EngineError> {
        self.sessions.read().unwrap().get(id).cloned().ok_or_else(|| EngineError::UnknownSession(id.to_string()))
    }

    /// Adds `triples` to `graph`, re-links against every knowledge base and
    /// merges accepted links. Returns the new triples and links.
    fn absorb(&self, graph: &mut KnowledgeGraph, triples: Vec<Triple>) -> Result<(Vec<Triple>, Vec<EntityLink>), EngineError> {
        let before = graph.len();
        for t in triples {
            graph.add_triple(t).map_err(|e| EngineError::Validation(e.to_string()))?;
        }
        if graph.len() == before {
            return Ok((Vec::new(), Vec::new()));
        }
        let threshold = self.config.dialogue.link_threshold;
        let mut candidates = Vec::new();
        for kb in &self.resources.kbs {
            candidates.extend(link_entities(graph, kb, threshold).map_err(|e| EngineError::Validation(e.to_string()))?);
        }
        let resolved = resolve_conflicts(&candidates, &self.resources.guidelines)
            .map_err(|e| EngineError::Validation(e.to_string()))?;
        let bridges_before = graph.len();
        for kb in &self.resources.kbs {
            let accepted: Vec<EntityLink> = resolved
                .iter()
                .filter(|l| l.kb_id == kb.graph_id() && l.status == LinkStatus::Accepted)
                .cloned()
                .collect();
            graph.merge_into(kb, &accepted).map_err(|e| EngineError::Validation(e.to_string()))?;
        }
        let new_link_ids: HashSet<&str> = graph.triples()[bridges_before..]
            .iter()
            .filter_map(|t| match &t.provenance {
                Provenance::Integration { link_id } => Some(link_id.as_str()),
                _ => None,
            })
            .collect();
        let links = resolved.iter().filter(|l| new_link_ids.contains(l.link_id.as_str())).cloned().collect();
        Ok((graph.triples()[before..].to_vec(), links))
    }

    pub fn ingest_note(&self, note: &ProviderNote, sink: &dyn EventSink) -> Result<IngestReport, EngineError> {
        patient_key(&note.patient_id)?;
        check_note(&note.patient_id, note).map_err(|e| EngineError::Validation(e.to_string()))?;
        let handle = {
            let mut patients = self.patients.write().unwrap();
            patients
                .entry(note.patient_id.clone())
                .or_insert_with(|| Arc::new(RwLock::new(self.empty_record(&note.patient_id))))
                .clone()
        };
        let mut record = handle.write().unwrap();
        if record.notes.contains(&note.note_id) {
            return Err(EngineError::Conflict(format!("note {} already ingested", note.note_id)));
        }
        let extracted = extract_triples(note, &self.resources.patterns);
        let mut graph = record.graph.clone();
        let (added, links) = self.absorb(&mut graph, extracted)?;

        let mut warnings = Vec::new();
        if added.is_empty() {
            warnings.push(format!("note {} produced no new triples", note.note_id));
        }
        let (_, rec_warnings) = crate::ingest::extract_recommendations(&graph, &note.patient_id);
        warnings.extend(rec_warnings);

        let mut batch = vec![EngineEvent::NoteIngested {
            patient_id: note.patient_id.clone(),
            note_id: note.note_id.clone(),
            authored_at: note.authored_at,
            text: note.text.clone(),
        }];
        batch.extend(added.iter().map(|t| EngineEvent::TripleAdded { patient_id: note.patient_id.clone(), triple: t.clone() }));
        batch.extend(links.iter().map(|l| EngineEvent::LinkResolved { patient_id: note.patient_id.clone(), link: l.clone() }));
        sink.record(&batch).map_err(sink_err)?;

        record.view = self.view_of(&graph);
        record.graph = graph;
        record.notes.insert(note.note_id.clone());
        Ok(IngestReport { patient_id: note.patient_id.clone(), note_id: note.note_id.clone(), triples: added, links, warnings })
    }

    pub fn open_session(&self, patient_id: &EntityId, at: DateTime<Utc>, sink: &dyn EventSink) -> Result<String, EngineError> {
        if self.patient(patient_id).is_none() {
            return Err(EngineError::UnknownPatient(patient_id.to_string()));
        }
        let mut sessions = self.sessions.write().unwrap();
        let n = self.session_counter.load(Ordering::SeqCst) + 1;
        let session_id = format!("s{n:06}");
        sink.record(&[EngineEvent::SessionOpened { session_id: session_id.clone(), patient_id: patient_id.clone(), at }])
            .map_err(sink_err)?;
        self.session_counter.store(n, Ordering::SeqCst);
        let session = DialogueSession::new(&session_id, patient_id.clone(), &self.resources.tree.tree_id);
        sessions.insert(session_id.clone(), Arc::new(Mutex::new(session)));
        Ok(session_id)
    }

    pub fn send_message(
        &self,
        session_id: &str,
        text: &str,
        at: DateTime<Utc>,
        sink: &dyn EventSink,
    ) -> Result<StepOutcome, EngineError> {
        if text.trim().is_empty() {
            return Err(EngineError::Validation("empty message".into()));
        }
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock().unwrap();
        let patient = self
            .patient(&session.patient_id)
            .ok_or_else(|| EngineError::UnknownPatient(session.patient_id.to_string()))?;
        let mut record = patient.write().unwrap();

        let mut next = session.clone();
        let outcome = {
            let policy = self.policy.read().unwrap();
            let ctx = StepContext {
                graph: &record.view,
                constraints: &self.resources.constraints,
                tree: &self.resources.tree,
                policy: &policy,
                templates: &self.resources.templates,
                lexicon: &self.resources.lexicon,
                config: self.config.dialogue,
            };
            step(&mut next, text, &ctx, at).map_err(|e| EngineError::Validation(e.to_string()))?
        };

        let chat = extract_chat_triples(
            text,
            &next.patient_id,
            &next.session_id,
            &outcome.patient_message_id,
            &self.resources.patterns,
        );
        let mut graph = record.graph.clone();
        let (added, links) = self.absorb(&mut graph, chat)?;

        let mut alerts = self.alerts.write().unwrap();
        let mut new_alerts = Vec::new();
        for a in &outcome.alerts {
            new_alerts.push(AlertRecord { seq: alerts.len() as u64 + new_alerts.len() as u64 + 1, alert: a.clone(), acknowledged_at: None });
        }

        let patient_turn = next.turn(&outcome.patient_message_id).cloned().expect("step logs the patient turn");
        let bot_turn = next.turn(&outcome.reply_message_id).cloned().expect("step logs the reply");
        let mut batch = vec![EngineEvent::MessageIn { session_id: session_id.to_string(), turn: patient_turn }];
        batch.extend(added.iter().map(|t| EngineEvent::TripleAdded { patient_id: next.patient_id.clone(), triple: t.clone() }));
        batch.extend(links.iter().map(|l| EngineEvent::LinkResolved { patient_id: next.patient_id.clone(), link: l.clone() }));
        batch.extend(new_alerts.iter().map(|r| EngineEvent::AlertRaised { alert_seq: r.seq, alert: r.alert.clone() }));
        batch.push(EngineEvent::MessageOut {
            session_id: session_id.to_string(),
            turn: bot_turn,
            tree_state: next.tree_state.clone(),
            activity_log: next.activity_log.clone(),
        });
        sink.record(&batch).map_err(sink_err)?;

        alerts.extend(new_alerts);
        if !added.is_empty() {
            record.view = self.view_of(&graph);
            record.graph = graph;
        }
        *session = next;
        Ok(outcome)
    }

    pub fn feedback(
        &self,
        session_id: &str,
        message_id: &str,
        source: FeedbackSource,
        signal: Signal,
        at: DateTime<Utc>,
        sink: &dyn EventSink,
    ) -> Result<FeedbackOutcome, EngineError> {
        let handle = self.session_handle(session_id)?;
        let session = handle.lock().unwrap();
        let turn = session
            .turn(message_id)
            .filter(|t| t.speaker == Speaker::Bot)
            .ok_or_else(|| EngineError::UnknownMessage(message_id.to_string()))?;
        let meta = turn.meta.clone().expect("bot turns carry metadata");
        let mut seen = self.feedback_seen.lock().unwrap();
        let key = (session_id.to_string(), message_id.to_string(), source);
        if seen.contains(&key) {
            return Err(EngineError::Conflict(format!("feedback from {source:?} already recorded for {message_id}")));
        }
        let fb = FeedbackEvent { session_id: session_id.to_string(), message_id: message_id.to_string(), source, signal };
        let mut policy = self.policy.write().unwrap();
        let mut batch = vec![EngineEvent::FeedbackReceived { feedback: fb.clone(), at }];
        let mut updated = None;
        if let (Some(state), false) = (meta.policy_state, meta.fallback) {
            let mut trial = policy.clone();
            let value = trial.update_from(state, &meta.template_id, &fb).map_err(|e| EngineError::Validation(e.to_string()))?;
            let cell = trial.cell(state, &meta.template_id);
            batch.push(EngineEvent::PolicyUpdated { state, template_id: meta.template_id.clone(), value, count: cell.count });
            updated = Some((trial, value));
        }
        sink.record(&batch).map_err(sink_err)?;
        seen.insert(key);
        Ok(FeedbackOutcome {
            q_after: updated.map(|(trial, value)| {
                *policy = trial;
                self.policy_updates.fetch_add(1, Ordering::SeqCst);
                value
            }),
        })
    }

    pub fn acknowledge_alert(&self, alert_id: &str, at: DateTime<Utc>, sink: &dyn EventSink) -> Result<AlertRecord, EngineError> {
        let mut alerts = self.alerts.write().unwrap();
        let rec = alerts
            .iter_mut()
            .find(|r| r.alert.alert_id == alert_id)
            .ok_or_else(|| EngineError::UnknownAlert(alert_id.to_string()))?;
        if rec.acknowledged_at.is_some() {
            return Err(EngineError::Conflict(format!("alert {alert_id} already acknowledged")));
        }
        sink.record(&[EngineEvent::AlertAcknowledged { alert_id: alert_id.to_string(), at }]).map_err(sink_err)?;
        rec.acknowledged_at = Some(at);
        Ok(rec.clone())
    }

    pub fn alerts_since(&self, since_seq: u64) -> Vec<AlertRecord> {
        self.alerts.read().unwrap().iter().filter(|r| r.seq > since_seq).cloned().collect()
    }

    pub fn patient_graph(&self, patient_id: &EntityId) -> Option<KnowledgeGraph> {
        self.patient(patient_id).map(|p| p.read().unwrap().graph.clone())
    }

    /// Patient graph composed with the knowledge bases, as seen by dialogue.
    pub fn patient_view(&self, patient_id: &EntityId) -> Option<KnowledgeGraph> {
        self.patient(patient_id).map(|p| p.read().unwrap().view.clone())
    }

    pub fn patients(&self) -> Vec<EntityId> {
        self.patients.read().unwrap().keys().cloned().collect()
    }

    pub fn session(&self, session_id: &str) -> Option<DialogueSession> {
        self.sessions.read().unwrap().get(session_id).map(|s| s.lock().unwrap().clone())
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().unwrap().keys().cloned().collect()
    }

    pub fn explanations(&self, session_id: &str) -> Result<Vec<TurnExplanation>, EngineError> {
        let handle = self.session_handle(session_id)?;
        let session = handle.lock().unwrap();
        Ok(session
            .turn_log
            .iter()
            .filter_map(|t| {
                let meta = t.meta.as_ref()?;
                Some(TurnExplanation {
                    message_id: t.message_id.clone(),
                    template_id: meta.template_id.clone(),
                    action_type: meta.action_type,
                    fallback: meta.fallback,
                    paths: meta.explanation.iter().map(|p| p.to_string()).collect(),
                    selection: meta.selection.clone(),
                })
            })
            .collect())
    }

    pub fn policy(&self) -> ResponsePolicy {
        self.policy.read().unwrap().clone()
    }

    /// Replaces the q table, keeping the configured parameters.
    pub fn restore_policy(&self, snapshot: &ResponsePolicy) {
        let mut p = self.policy.write().unwrap();
        for (state, template_id, cell) in snapshot.cells() {
            p.set_cell(*state, template_id, *cell);
        }
    }

    pub fn policy_update_count(&self) -> u64 {
        self.policy_updates.load(Ordering::SeqCst)
    }

    /// Folds one logged event into the state. Call [`Engine::finish_replay`]
    /// once the log is exhausted.
    pub fn apply(&self, event: &EngineEvent) -> Result<(), EngineError> {
        let replay = |m: String| EngineError::Replay(m);
        match event {
            EngineEvent::NoteIngested { patient_id, note_id, .. } => {
                let handle = {
                    let mut patients = self.patients.write().unwrap();
                    patients
                        .entry(patient_id.clone())
                        .or_insert_with(|| Arc::new(RwLock::new(self.empty_record(patient_id))))
                        .clone()
                };
                handle.write().unwrap().notes.insert(note_id.clone());
            }
            EngineEvent::TripleAdded { patient_id, triple } => {
                let handle = self.patient(patient_id).ok_or_else(|| replay(format!("triple for unknown patient {patient_id}")))?;
                handle.write().unwrap().graph.add_triple(triple.clone()).map_err(|e| replay(e.to_string()))?;
            }
            EngineEvent::LinkResolved { .. } => {}
            EngineEvent::SessionOpened { session_id, patient_id, .. } => {
                if self.patient(patient_id).is_none() {
                    return Err(replay(format!("session {session_id} for unknown patient {patient_id}")));
                }
                let n: u64 = session_id.trim_start_matches('s').parse().unwrap_or(0);
                self.session_counter.fetch_max(n, Ordering::SeqCst);
                let session = DialogueSession::new(session_id, patient_id.clone(), &self.resources.tree.tree_id);
                self.sessions.write().unwrap().insert(session_id.clone(), Arc::new(Mutex::new(session)));
            }
            EngineEvent::MessageIn { session_id, turn } => {
                let handle = self.session_handle(session_id).map_err(|e| replay(e.to_string()))?;
                let mut s = handle.lock().unwrap();
                s.turn_log.push(turn.clone());
                s.resync_counter();
            }
            EngineEvent::MessageOut { session_id, turn, tree_state, activity_log } => {
                let handle = self.session_handle(session_id).map_err(|e| replay(e.to_string()))?;
                let mut s = handle.lock().unwrap();
                s.turn_log.push(turn.clone());
                s.tree_state = tree_state.clone();
                s.activity_log = activity_log.clone();
                s.resync_counter();
            }
            EngineEvent::AlertRaised { alert_seq, alert } => {
                self.alerts.write().unwrap().push(AlertRecord { seq: *alert_seq, alert: alert.clone(), acknowledged_at: None });
            }
            EngineEvent::AlertAcknowledged { alert_id, at } => {
                let mut alerts = self.alerts.write().unwrap();
                let rec = alerts
                    .iter_mut()
                    .find(|r| &r.alert.alert_id == alert_id)
                    .ok_or_else(|| replay(format!("acknowledgement of unknown alert {alert_id}")))?;
                rec.acknowledged_at = Some(*at);
            }
            EngineEvent::FeedbackReceived { feedback, .. } => {
                self.feedback_seen.lock().unwrap().insert((
                    feedback.session_id.clone(),
                    feedback.message_id.clone(),
                    feedback.source,
                ));
            }
            EngineEvent::PolicyUpdated { state, template_id, value, count } => {
                self.policy.write().unwrap().set_cell(*state, template_id, Cell { value: *value, count: *count });
                self.policy_updates.fetch_add(1, Ordering::SeqCst);
            }
        }
        Ok(())
    }

    /// Recomputes derived views after a replay.
    pub fn finish_replay(&self) {
        for handle in self.patients.read().unwrap().values() {
            let mut r = handle.write().unwrap();
            r.view = self.view_of(&r.graph);
        }
        self.alerts.write().unwrap().sort_by_key(|r| r.seq);
    }

    pub fn replay<'a>(resources: Arc<Resources>, config: EngineConfig, events: impl IntoIterator<Item = &'a EngineEvent>) -> Result<Self, EngineError> {
        let engine = Engine::new(resources, config)?;
        for e in events {
            engine.apply(e)?;
        }
        engine.finish_replay();
        Ok(engine)
    }

    /// Canonical dump of all state, for comparing engines.
    pub fn state_digest(&self) -> serde_json::Value {
        let patients: BTreeMap<String, serde_json::Value> = self
            .patients
            .read()
            .unwrap()
            .iter()
            .map(|(id, r)| {
                let r = r.read().unwrap();
                (id.to_string(), serde_json::json!({ "graph": r.graph.to_tsv(), "notes": r.notes }))
            })
            .collect();
        let sessions: BTreeMap<String, DialogueSession> = self
            .sessions
            .read()
            .unwrap()
            .iter()
            .map(|(id, s)| (id.clone(), s.lock().unwrap().clone()))
            .collect();
        let feedback: Vec<_> = self.feedback_seen.lock().unwrap().iter().cloned().collect();
        serde_json::json!({
            "patients": patients,
            "sessions": sessions,
            "alerts": *self.alerts.read().unwrap(),
            "policy": serde_json::from_str::<serde_json::Value>(&self.policy.read().unwrap().to_json()).expect("json"),
            "feedback": feedback,
        })
    }
}
