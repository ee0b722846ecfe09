//! Knowledge-graph grounded conversational support: patient graphs built
//! from provider notes, linked to medical knowledge bases, with safety
//! constraints over graph paths, questionnaire screening and a bandit
//! response policy.

pub mod dialogue;
pub mod engine;
pub mod ingest;
pub mod kg;
pub mod link;
pub mod policy;
pub mod resources;
pub mod safety;
pub mod screeners;

pub use dialogue::{step, DialogueSession, Intent, IntentKind, ResponseCandidate, StepContext, StepOutcome};
pub use engine::{Engine, EngineConfig, EngineError, EngineEvent, EventSink, MemorySink, NullSink};
pub use ingest::{extract_recommendations, extract_triples, ExtractionPattern, ProviderNote, Recommendation};
pub use kg::{EntityId, KnowledgeGraph, Literal, Object, Path, PredicatePattern, Provenance, Triple};
pub use link::{cosine, embed, link_entities, resolve_conflicts, EntityLink, GuidelineRule, LinkStatus};
pub use policy::{FeedbackEvent, FeedbackSource, PolicyState, ResponsePolicy, Signal};
pub use resources::{ResourceSources, Resources};
pub use safety::{check_action, parse_constraints, ActionType, Bindings, PathConstraint, Verdict};
pub use screeners::{advance, match_concepts, Alert, Escalation, QuestionnaireTree, Thresholds, TreeState};
