//! Entity linking between a patient graph and knowledge bases.
//!
//! Labels are embedded as hashed character-trigram count vectors (FNV-1a 64
//! into 256 buckets, L2-normalized) and compared by cosine similarity. The
//! [`Embedder`] trait is the seam for substituting learned vectors.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, Literal, Namespace, Object, Provenance};

pub const EMBEDDING_DIMS: usize = 256;
pub const DEFAULT_LINK_THRESHOLD: f64 = 0.75;

/// Predicate carrying a free-text alias for a `patient:` entity.
pub const ALIAS: &str = "alias";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("rules {first} and {second} are both {kind} at priority {priority}")]
    ConflictingRuleSet { kind: String, priority: i64, first: String, second: String },
    #[error("guideline file: {0}")]
    RuleFile(String),
}

#[derive(Clone, PartialEq)]
pub struct EmbeddingVector(pub [f64; EMBEDDING_DIMS]);

impl EmbeddingVector {
    pub fn zero() -> Self {
        EmbeddingVector([0.0; EMBEDDING_DIMS])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    /// Scales to unit length; the zero vector stays zero.
    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.0.iter_mut().for_each(|x| *x /= n);
        }
        self
    }

    pub fn scaled(mut self, k: f64) -> Self {
        self.0.iter_mut().for_each(|x| *x *= k);
        self
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let (na, nb) = (self.norm(), other.norm());
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let dot: f64 = self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum();
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nz = self.0.iter().filter(|&&x| x != 0.0).count();
        write!(f, "EmbeddingVector({nz} non-zero)")
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Unnormalized trigram bucket counts.
pub fn trigram_counts(text: &str) -> EmbeddingVector {
    let mut v = EmbeddingVector::zero();
    if text.is_empty() {
        return v;
    }
    let padded: Vec<char> = std::iter::once('#')
        .chain(text.to_lowercase().chars())
        .chain(std::iter::once('#'))
        .collect();
    let mut buf = String::with_capacity(12);
    for w in padded.windows(3) {
        buf.clear();
        buf.extend(w);
        let bucket = (fnv1a64(buf.as_bytes()) % EMBEDDING_DIMS as u64) as usize;
        v.0[bucket] += 1.0;
    }
    v
}

pub fn embed(text: &str) -> EmbeddingVector {
    trigram_counts(text).normalized()
}

pub fn cosine(a: &str, b: &str) -> f64 {
    embed(a).cosine(&embed(b))
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> EmbeddingVector;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrigramEmbedder;

impl Embedder for TrigramEmbedder {
    fn embed(&self, text: &str) -> EmbeddingVector {
        embed(text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "rule_id", rename_all = "lowercase")]
pub enum LinkStatus {
    Candidate,
    Accepted,
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityLink {
    pub link_id: String,
    pub source: EntityId,
    pub target: EntityId,
    /// Graph id of the knowledge base `target` came from.
    pub kb_id: String,
    pub score: f64,
    pub status: LinkStatus,
}

impl EntityLink {
    pub fn candidate(source: EntityId, target: EntityId, kb_id: &str, score: f64) -> Self {
        EntityLink {
            link_id: format!("{source}~{target}"),
            source,
            target,
            kb_id: kb_id.to_string(),
            score,
            status: LinkStatus::Candidate,
        }
    }
}

/// Entities of a patient graph that are eligible for linking, with their
/// labels: every `kb:` entity plus `patient:` entities carrying an alias.
/// Entities that only appear through bridge triples are excluded.
pub fn linkable_entities(patient_kg: &KnowledgeGraph) -> Vec<(EntityId, String)> {
    let mut seen: BTreeMap<EntityId, String> = BTreeMap::new();
    for t in patient_kg.triples() {
        if matches!(t.provenance, Provenance::Integration { .. }) {
            continue;
        }
        let mut consider = |id: &EntityId| {
            if id.namespace() == Namespace::Kb {
                seen.entry(id.clone()).or_insert_with(|| id.label());
            }
        };
        consider(&t.subject);
        if let Object::Entity(o) = &t.object {
            consider(o);
        }
        if t.predicate == ALIAS && t.subject.namespace() == Namespace::Patient {
            if let Object::Literal(Literal::String { value }) = &t.object {
                seen.entry(t.subject.clone()).or_insert_with(|| value.clone());
            }
        }
    }
    seen.into_iter().collect()
}

/// Candidate links from the patient graph into `kb` with cosine score at or
/// above `threshold`, sorted by (source, score desc, target).
pub fn link_entities(
    patient_kg: &KnowledgeGraph,
    kb: &KnowledgeGraph,
    threshold: f64,
) -> Result<Vec<EntityLink>, LinkError> {
    link_entities_with(&TrigramEmbedder, patient_kg, kb, threshold)
}

pub fn link_entities_with(
    embedder: &dyn Embedder,
    patient_kg: &KnowledgeGraph,
    kb: &KnowledgeGraph,
    threshold: f64,
) -> Result<Vec<EntityLink>, LinkError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(LinkError::InvalidThreshold(threshold));
    }
    let targets: Vec<(&EntityId, EmbeddingVector)> =
        kb.entities().into_iter().map(|id| (id, embedder.embed(&id.label()))).collect();
    let mut out = Vec::new();
    for (source, label) in linkable_entities(patient_kg) {
        let v = embedder.embed(&label);
        for (target, tv) in &targets {
            let score = v.cosine(tv);
            if score >= threshold {
                out.push(EntityLink::candidate(source.clone(), (*target).clone(), kb.graph_id(), score));
            }
        }
    }
    sort_candidates(&mut out);
    Ok(out)
}

pub fn sort_candidates(links: &mut [EntityLink]) {
    links.sort_by(|a, b| {
        a.source
            .cmp(&b.source)
            .then(b.score.total_cmp(&a.score))
            .then_with(|| a.target.cmp(&b.target))
    });
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleKind {
    PreferHighestScore,
    PreferKb(String),
    MaxLinksPerEntity(usize),
    /// Acts when the merged view is composed: knowledge-base literals that
    /// contradict a patient literal on a bridged entity are shadowed.
    KeepPatientValueOnContradiction,
}

impl RuleKind {
    fn tag(&self) -> &'static str {
        match self {
            RuleKind::PreferHighestScore => "prefer_highest_score",
            RuleKind::PreferKb(_) => "prefer_kb",
            RuleKind::MaxLinksPerEntity(_) => "max_links_per_entity",
            RuleKind::KeepPatientValueOnContradiction => "keep_patient_value_on_contradiction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuidelineRule {
    pub rule_id: String,
    pub kind: RuleKind,
    pub priority: i64,
}

#[derive(Deserialize)]
struct RawRule {
    rule_id: String,
    kind: String,
    #[serde(default)]
    params: serde_json::Value,
    priority: i64,
}

/// Parses a guideline file: a JSON array of `{rule_id, kind, params, priority}`.
pub fn parse_guidelines(json: &str) -> Result<Vec<GuidelineRule>, LinkError> {
    let raw: Vec<RawRule> = serde_json::from_str(json).map_err(|e| LinkError::RuleFile(e.to_string()))?;
    raw.into_iter()
        .map(|r| {
            let kind = match r.kind.as_str() {
                "prefer_highest_score" => RuleKind::PreferHighestScore,
                "prefer_kb" => RuleKind::PreferKb(
                    r.params
                        .get("kb_id")
                        .and_then(|v| v.as_str())
                        .ok_or_else(|| LinkError::RuleFile(format!("{}: prefer_kb needs params.kb_id", r.rule_id)))?
                        .to_string(),
                ),
                "max_links_per_entity" => {
                    let n = r
                        .params
                        .get("n")
                        .and_then(|v| v.as_u64())
                        .filter(|&n| n >= 1)
                        .ok_or_else(|| {
                            LinkError::RuleFile(format!("{}: max_links_per_entity needs params.n >= 1", r.rule_id))
                        })?;
                    RuleKind::MaxLinksPerEntity(n as usize)
                }
                "keep_patient_value_on_contradiction" => RuleKind::KeepPatientValueOnContradiction,
                other => return Err(LinkError::RuleFile(format!("{}: unknown kind {other:?}", r.rule_id))),
            };
            Ok(GuidelineRule { rule_id: r.rule_id, kind, priority: r.priority })
        })
        .collect()
}

pub fn keeps_patient_values(rules: &[GuidelineRule]) -> bool {
    rules.iter().any(|r| r.kind == RuleKind::KeepPatientValueOnContradiction)
}

/// Decides every candidate. Clinician rules run in priority order, then the
/// defaults `PreferHighestScore` and `MaxLinksPerEntity(1)`. Rules act per
/// source entity on the links still undecided.
pub fn resolve_conflicts(candidates: &[EntityLink], rules: &[GuidelineRule]) -> Result<Vec<EntityLink>, LinkError> {
    let mut ordered: Vec<&GuidelineRule> = rules.iter().collect();
    ordered.sort_by(|a, b| a.priority.cmp(&b.priority).then_with(|| a.rule_id.cmp(&b.rule_id)));
    for pair in ordered.windows(2) {
        if pair[0].priority == pair[1].priority && pair[0].kind.tag() == pair[1].kind.tag() {
            return Err(LinkError::ConflictingRuleSet {
                kind: pair[0].kind.tag().to_string(),
                priority: pair[0].priority,
                first: pair[0].rule_id.clone(),
                second: pair[1].rule_id.clone(),
            });
        }
    }
    let defaults = [
        GuidelineRule { rule_id: "PreferHighestScore".into(), kind: RuleKind::PreferHighestScore, priority: i64::MAX },
        GuidelineRule { rule_id: "MaxLinksPerEntity".into(), kind: RuleKind::MaxLinksPerEntity(1), priority: i64::MAX },
    ];
    ordered.extend(defaults.iter());

    let mut links: Vec<EntityLink> = candidates.to_vec();
    let mut sources: Vec<EntityId> = links.iter().map(|l| l.source.clone()).collect();
    sources.sort();
    sources.dedup();

    for rule in ordered {
        for source in &sources {
            let mut open: Vec<usize> = links
                .iter()
                .enumerate()
                .filter(|(_, l)| &l.source == source && l.status == LinkStatus::Candidate)
                .map(|(i, _)| i)
                .collect();
            if open.is_empty() {
                continue;
            }
            let reject: HashSet<usize> = match &rule.kind {
                RuleKind::PreferHighestScore => {
                    let best = open.iter().map(|&i| links[i].score).fold(f64::NEG_INFINITY, f64::max);
                    open.iter().copied().filter(|&i| links[i].score < best).collect()
                }
                RuleKind::PreferKb(kb) => {
                    if open.iter().any(|&i| &links[i].kb_id == kb) {
                        open.iter().copied().filter(|&i| &links[i].kb_id != kb).collect()
                    } else {
                        HashSet::new()
                    }
                }
                RuleKind::MaxLinksPerEntity(n) => {
                    open.sort_by(|&a, &b| {
                        links[b].score.total_cmp(&links[a].score).then_with(|| links[a].target.cmp(&links[b].target))
                    });
                    open.iter().skip(*n).copied().collect()
                }
                RuleKind::KeepPatientValueOnContradiction => HashSet::new(),
            };
            for i in reject {
                links[i].status = LinkStatus::Rejected(rule.rule_id.clone());
            }
        }
    }
    for l in &mut links {
        if l.status == LinkStatus::Candidate {
            l.status = LinkStatus::Accepted;
        }
    }
    Ok(links)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;

    fn e(s: &str) -> EntityId {
        s.parse().unwrap()
    }

    fn cand(src: &str, tgt: &str, score: f64) -> EntityLink {
        EntityLink::candidate(e(src), e(tgt), "kb1", score)
    }

    #[test]
    fn embedding_basics() {
        assert_eq!(embed("sertraline"), embed("sertraline"));
        assert!((cosine("sertraline", "sertraline") - 1.0).abs() < 1e-12);
        assert!(embed("").is_zero());
        assert!((embed("x").norm() - 1.0).abs() < 1e-9);
        assert!(cosine("sertraline", "sertralin") > cosine("sertraline", "ibuprofen"));
        assert_eq!(cosine("", "abc"), 0.0);
    }

    #[test]
    fn embedding_is_case_insensitive() {
        assert_eq!(embed("Sertraline"), embed("sertraline"));
    }

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a 64 test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn threshold_bounds() {
        let g = KnowledgeGraph::new("p");
        let kb = KnowledgeGraph::new("kb");
        assert_eq!(link_entities(&g, &kb, 1.01), Err(LinkError::InvalidThreshold(1.01)));
        assert!(link_entities(&g, &kb, 0.0).is_err());
        assert!(link_entities(&g, &kb, 1.0).unwrap().is_empty());
    }

    #[test]
    fn identical_labels_link_at_one() {
        let prov = Provenance::ProviderNote { note_id: "n".into(), span: (0, 1) };
        let mut g = KnowledgeGraph::new("p1");
        g.add_triple(Triple::new(e("patient:p1"), "takes", e("kb:sertraline"), 1.0, prov)).unwrap();
        let mut kb = KnowledgeGraph::new("mayo");
        kb.add_triple(Triple::new(
            e("kb:sertraline"),
            "has_side_effect",
            e("kb:dizziness"),
            1.0,
            Provenance::KnowledgeBase { kb_id: "mayo".into(), record_id: "1".into() },
        ))
        .unwrap();
        let links = link_entities(&g, &kb, 0.75).unwrap();
        assert_eq!(links.len(), 1);
        assert_eq!(links[0].target, e("kb:sertraline"));
        assert!((links[0].score - 1.0).abs() < 1e-12);
        assert_eq!(links[0].kb_id, "mayo");
    }

    #[test]
    fn aliases_make_patient_entities_linkable() {
        let prov = Provenance::ChatTurn { session_id: "s".into(), message_id: "m".into() };
        let mut g = KnowledgeGraph::new("p1");
        g.add_triple(Triple::new(e("patient:sert"), ALIAS, Literal::String { value: "sertraline".into() }, 1.0, prov))
            .unwrap();
        let found = linkable_entities(&g);
        assert_eq!(found, vec![(e("patient:sert"), "sertraline".to_string())]);
    }

    #[test]
    fn single_candidate_accepted_by_defaults() {
        let out = resolve_conflicts(&[cand("kb:s", "kb:t", 0.9)], &[]).unwrap();
        assert_eq!(out[0].status, LinkStatus::Accepted);
    }

    #[test]
    fn higher_score_wins() {
        let out = resolve_conflicts(&[cand("kb:s", "kb:t1", 0.92), cand("kb:s", "kb:t2", 0.85)], &[]).unwrap();
        assert_eq!(out[0].status, LinkStatus::Accepted);
        assert_eq!(out[1].status, LinkStatus::Rejected("PreferHighestScore".into()));
    }

    #[test]
    fn ties_break_on_target_id() {
        let out = resolve_conflicts(&[cand("kb:s", "kb:b", 0.9), cand("kb:s", "kb:a", 0.9)], &[]).unwrap();
        let accepted: Vec<_> = out.iter().filter(|l| l.status == LinkStatus::Accepted).collect();
        assert_eq!(accepted.len(), 1);
        assert_eq!(accepted[0].target, e("kb:a"));
        assert_eq!(out[0].status, LinkStatus::Rejected("MaxLinksPerEntity".into()));
    }

    #[test]
    fn prefer_kb_runs_before_defaults() {
        let mut a = cand("kb:s", "kb:umls/s", 1.0);
        a.kb_id = "umls".into();
        let mut b = cand("kb:s", "kb:mayo/s", 0.8);
        b.kb_id = "mayo".into();
        let rules = vec![GuidelineRule { rule_id: "g1".into(), kind: RuleKind::PreferKb("mayo".into()), priority: 1 }];
        let out = resolve_conflicts(&[a, b], &rules).unwrap();
        assert_eq!(out[0].status, LinkStatus::Rejected("g1".into()));
        assert_eq!(out[1].status, LinkStatus::Accepted);
    }

    #[test]
    fn max_links_rule_allows_more_than_one() {
        let rules =
            vec![GuidelineRule { rule_id: "two".into(), kind: RuleKind::MaxLinksPerEntity(2), priority: 0 }];
        // defaults still apply after clinician rules
        let out = resolve_conflicts(
            &[cand("kb:s", "kb:a", 0.9), cand("kb:s", "kb:b", 0.9), cand("kb:s", "kb:c", 0.95)],
            &rules,
        )
        .unwrap();
        assert_eq!(out[0].status, LinkStatus::Rejected("PreferHighestScore".into()));
        assert_eq!(out[1].status, LinkStatus::Rejected("two".into()));
        assert_eq!(out[2].status, LinkStatus::Accepted);
    }

    #[test]
    fn same_kind_same_priority_is_an_error() {
        let rules = vec![
            GuidelineRule { rule_id: "a".into(), kind: RuleKind::PreferHighestScore, priority: 3 },
            GuidelineRule { rule_id: "b".into(), kind: RuleKind::PreferHighestScore, priority: 3 },
        ];
        assert!(matches!(resolve_conflicts(&[], &rules), Err(LinkError::ConflictingRuleSet { .. })));
    }

    #[test]
    fn guideline_file_parses() {
        let rules = parse_guidelines(
            r#"[{"rule_id":"g1","kind":"prefer_kb","params":{"kb_id":"mayo-fixture"},"priority":1},
                {"rule_id":"g2","kind":"max_links_per_entity","params":{"n":2},"priority":2},
                {"rule_id":"g3","kind":"keep_patient_value_on_contradiction","priority":3}]"#,
        )
        .unwrap();
        assert_eq!(rules[0].kind, RuleKind::PreferKb("mayo-fixture".into()));
        assert_eq!(rules[1].kind, RuleKind::MaxLinksPerEntity(2));
        assert!(keeps_patient_values(&rules));
        assert!(parse_guidelines(r#"[{"rule_id":"x","kind":"max_links_per_entity","params":{"n":0},"priority":1}]"#)
            .is_err());
    }
}
