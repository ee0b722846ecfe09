//! Named knowledge graphs of provenance-carrying triples.
//!
//! A [`KnowledgeGraph`] is either a patient graph (bootstrapped from provider
//! notes and chat turns) or an external knowledge base loaded from a TSV
//! fixture. The two kinds are kept physically separate and connected through
//! `same_as` bridge triples added by [`KnowledgeGraph::merge_into`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link::{EntityLink, LinkStatus};

/// Longest path any query may ask for.
pub const MAX_PATH_LEN: usize = 6;

/// Predicate used for bridges between a patient graph and a knowledge base.
pub const SAME_AS: &str = "same_as";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KgError {
    #[error("invalid triple: bad {field}: {reason}")]
    InvalidTriple { field: &'static str, reason: String },
    #[error("invalid entity id {0:?}")]
    InvalidEntity(String),
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    #[error("invalid path query: {0}")]
    InvalidQuery(String),
    #[error("dangling link {link_id}: {endpoint} not present")]
    DanglingLink { link_id: String, endpoint: EntityId },
    #[error("snapshot line {line}: {reason}")]
    Snapshot { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Namespace {
    Patient,
    Kb,
    Note,
    Sys,
}

impl Namespace {
    pub fn as_str(self) -> &'static str {
        match self {
            Namespace::Patient => "patient",
            Namespace::Kb => "kb",
            Namespace::Note => "note",
            Namespace::Sys => "sys",
        }
    }
}

impl FromStr for Namespace {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "patient" => Ok(Namespace::Patient),
            "kb" => Ok(Namespace::Kb),
            "note" => Ok(Namespace::Note),
            "sys" => Ok(Namespace::Sys),
            other => Err(KgError::InvalidEntity(other.to_string())),
        }
    }
}

/// `namespace:local` entity identifier. Ordering and equality follow the
/// canonical string form.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EntityId(String);

impl EntityId {
    pub fn new(namespace: Namespace, local: &str) -> Result<Self, KgError> {
        let id = format!("{}:{}", namespace.as_str(), local);
        if local.is_empty() || local.chars().any(char::is_whitespace) || local.to_lowercase() != local
        {
            return Err(KgError::InvalidEntity(id));
        }
        Ok(EntityId(id))
    }

    pub fn patient(local: &str) -> Result<Self, KgError> {
        Self::new(Namespace::Patient, local)
    }

    pub fn kb(local: &str) -> Result<Self, KgError> {
        Self::new(Namespace::Kb, local)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn namespace(&self) -> Namespace {
        let (ns, _) = self.0.split_once(':').expect("validated at construction");
        ns.parse().expect("validated at construction")
    }

    pub fn local(&self) -> &str {
        self.0.split_once(':').map(|(_, l)| l).unwrap_or_default()
    }

    /// Human label used for similarity: the last `/` segment of the local
    /// part with underscores turned back into spaces.
    pub fn label(&self) -> String {
        let local = self.local();
        let tail = local.rsplit('/').next().unwrap_or(local);
        tail.replace('_', " ")
    }
}

impl FromStr for EntityId {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (ns, local) = s
            .split_once(':')
            .ok_or_else(|| KgError::InvalidEntity(s.to_string()))?;
        let ns: Namespace = ns.parse().map_err(|_| KgError::InvalidEntity(s.to_string()))?;
        EntityId::new(ns, local)
    }
}

impl TryFrom<String> for EntityId {
    type Error = KgError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<EntityId> for String {
    fn from(value: EntityId) -> Self {
        value.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EntityId({})", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Literal {
    String { value: String },
    Number { value: f64, unit: Option<String> },
    Date { value: NaiveDate },
}

impl Literal {
    pub fn number(value: f64) -> Self {
        Literal::Number { value, unit: None }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Literal::Number { value, .. } => Some(*value),
            _ => None,
        }
    }

    fn to_token(&self) -> String {
        match self {
            Literal::String { value } => serde_json::to_string(value).expect("string encodes"),
            Literal::Number { value, unit: None } => value.to_string(),
            Literal::Number { value, unit: Some(u) } => format!("{value} {u}"),
            Literal::Date { value } => value.format("%Y-%m-%d").to_string(),
        }
    }

    fn from_token(token: &str) -> Result<Self, String> {
        if token.starts_with('"') {
            let value: String = serde_json::from_str(token).map_err(|e| e.to_string())?;
            return Ok(Literal::String { value });
        }
        if let Ok(value) = NaiveDate::parse_from_str(token, "%Y-%m-%d") {
            return Ok(Literal::Date { value });
        }
        let (num, unit) = match token.split_once(' ') {
            Some((n, u)) => (n, Some(u.to_string())),
            None => (token, None),
        };
        let value: f64 = num
            .parse()
            .map_err(|_| format!("unrecognized object {token:?}"))?;
        if !value.is_finite() {
            return Err(format!("non-finite number {token:?}"));
        }
        Ok(Literal::Number { value, unit })
    }
}

/// Object position of a triple. Serialized as the entity id string or as a
/// tagged literal object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Object {
    Entity(EntityId),
    Literal(Literal),
}

impl Object {
    pub fn as_entity(&self) -> Option<&EntityId> {
        match self {
            Object::Entity(e) => Some(e),
            Object::Literal(_) => None,
        }
    }

    pub fn as_literal(&self) -> Option<&Literal> {
        match self {
            Object::Literal(l) => Some(l),
            Object::Entity(_) => None,
        }
    }

    /// Canonical text form, also used in TSV snapshots.
    pub fn to_token(&self) -> String {
        match self {
            Object::Entity(e) => e.to_string(),
            Object::Literal(l) => l.to_token(),
        }
    }

    pub fn from_token(token: &str) -> Result<Self, String> {
        if let Ok(e) = token.parse::<EntityId>() {
            return Ok(Object::Entity(e));
        }
        Literal::from_token(token).map(Object::Literal)
    }
}

impl From<EntityId> for Object {
    fn from(value: EntityId) -> Self {
        Object::Entity(value)
    }
}

impl From<Literal> for Object {
    fn from(value: Literal) -> Self {
        Object::Literal(value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    /// `span` is a half-open byte range into the note text.
    ProviderNote { note_id: String, span: (usize, usize) },
    KnowledgeBase { kb_id: String, record_id: String },
    ChatTurn { session_id: String, message_id: String },
    Integration { link_id: String },
    SelfReport { session_id: String, message_id: String },
}

impl Provenance {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("provenance encodes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub subject: EntityId,
    pub predicate: String,
    pub object: Object,
    pub confidence: f64,
    pub provenance: Provenance,
}

impl Triple {
    pub fn new(
        subject: EntityId,
        predicate: impl Into<String>,
        object: impl Into<Object>,
        confidence: f64,
        provenance: Provenance,
    ) -> Self {
        Triple {
            subject,
            predicate: predicate.into(),
            object: object.into(),
            confidence,
            provenance,
        }
    }

    pub fn validate(&self) -> Result<(), KgError> {
        if self.predicate.is_empty()
            || self.predicate.chars().any(char::is_whitespace)
            || self.predicate.to_lowercase() != self.predicate
        {
            return Err(KgError::InvalidTriple {
                field: "predicate",
                reason: format!("{:?} is not a lowercase token", self.predicate),
            });
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(KgError::InvalidTriple {
                field: "confidence",
                reason: format!("{} outside [0, 1]", self.confidence),
            });
        }
        if let Provenance::ProviderNote { span: (s, e), .. } = self.provenance {
            if s > e {
                return Err(KgError::InvalidTriple {
                    field: "provenance",
                    reason: format!("span {s}..{e} is reversed"),
                });
            }
        }
        if let Object::Literal(Literal::Number { value, .. }) = &self.object {
            if !value.is_finite() {
                return Err(KgError::InvalidTriple {
                    field: "object",
                    reason: "non-finite number".into(),
                });
            }
        }
        Ok(())
    }

    /// Identity key: two triples are duplicates iff their keys are equal.
    pub fn key(&self) -> TripleKey {
        TripleKey {
            subject: self.subject.clone(),
            predicate: self.predicate.clone(),
            object: self.object.to_token(),
            provenance: self.provenance.to_json(),
        }
    }

    /// One TSV snapshot line (no trailing newline).
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.subject,
            self.predicate,
            self.object.to_token(),
            self.confidence,
            self.provenance.to_json()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TripleKey {
    pub subject: EntityId,
    pub predicate: String,
    pub object: String,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub nodes: Vec<EntityId>,
    pub edges: Vec<Triple>,
}

impl Path {
    pub fn single(node: EntityId) -> Self {
        Path { nodes: vec![node], edges: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn start(&self) -> &EntityId {
        &self.nodes[0]
    }

    pub fn end(&self) -> &EntityId {
        self.nodes.last().expect("path has at least one node")
    }

    /// Structural check: edges chain through nodes and no node repeats.
    pub fn is_well_formed(&self) -> bool {
        if self.nodes.is_empty() || self.edges.len() + 1 != self.nodes.len() {
            return false;
        }
        let chained = self.edges.iter().enumerate().all(|(i, e)| {
            e.subject == self.nodes[i] && e.object.as_entity() == Some(&self.nodes[i + 1])
        });
        let distinct: HashSet<&EntityId> = self.nodes.iter().collect();
        chained && distinct.len() == self.nodes.len()
    }

    pub fn confidence_product(&self) -> f64 {
        self.edges.iter().map(|e| e.confidence).product()
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.nodes[0])?;
        for (edge, node) in self.edges.iter().zip(&self.nodes[1..]) {
            write!(f, " -{}-> {}", edge.predicate, node)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PredicatePattern {
    Any,
    Exact(String),
}

impl PredicatePattern {
    pub fn exact(p: &str) -> Self {
        PredicatePattern::Exact(p.to_string())
    }

    pub fn matches(&self, predicate: &str) -> bool {
        match self {
            PredicatePattern::Any => true,
            PredicatePattern::Exact(p) => p == predicate,
        }
    }
}

impl fmt::Display for PredicatePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredicatePattern::Any => f.write_str("*"),
            PredicatePattern::Exact(p) => f.write_str(p),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    pub added: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    graph_id: String,
    triples: Vec<Triple>,
    keys: HashSet<TripleKey>,
    outgoing: HashMap<EntityId, Vec<usize>>,
    entities: HashSet<EntityId>,
}

impl KnowledgeGraph {
    pub fn new(graph_id: impl Into<String>) -> Self {
        KnowledgeGraph { graph_id: graph_id.into(), ..Default::default() }
    }

    pub fn graph_id(&self) -> &str {
        &self.graph_id
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Triples in insertion order.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains_entity(&self, id: &EntityId) -> bool {
        self.entities.contains(id)
    }

    /// All entities, sorted.
    pub fn entities(&self) -> Vec<&EntityId> {
        let mut out: Vec<&EntityId> = self.entities.iter().collect();
        out.sort();
        out
    }

    pub fn outgoing(&self, id: &EntityId) -> impl Iterator<Item = &Triple> {
        self.outgoing
            .get(id)
            .into_iter()
            .flatten()
            .map(move |&i| &self.triples[i])
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.keys.contains(&t.key())
    }

    /// Inserts `t` unless an identical (subject, predicate, object,
    /// provenance) quadruple is already present.
    pub fn add_triple(&mut self, t: Triple) -> Result<bool, KgError> {
        t.validate()?;
        if !self.keys.insert(t.key()) {
            return Ok(false);
        }
        let idx = self.triples.len();
        self.outgoing.entry(t.subject.clone()).or_default().push(idx);
        self.entities.insert(t.subject.clone());
        if let Object::Entity(o) = &t.object {
            self.entities.insert(o.clone());
        }
        self.triples.push(t);
        Ok(true)
    }

    /// All simple paths from `start` whose edge predicates match `pattern`
    /// position by position and whose final node matches `end` (`None` is a
    /// wildcard). Sorted by length, then node sequence; parallel edges keep
    /// insertion order.
    pub fn find_paths(
        &self,
        start: &EntityId,
        pattern: &[PredicatePattern],
        end: Option<&EntityId>,
        max_len: usize,
    ) -> Result<Vec<Path>, KgError> {
        if !(1..=MAX_PATH_LEN).contains(&max_len) {
            return Err(KgError::InvalidQuery(format!("max_len {max_len} outside 1..={MAX_PATH_LEN}")));
        }
        if pattern.len() > max_len {
            return Err(KgError::InvalidQuery(format!(
                "pattern length {} exceeds max_len {max_len}",
                pattern.len()
            )));
        }
        if !self.contains_entity(start) {
            return Err(KgError::UnknownEntity(start.clone()));
        }
        let mut out = Vec::new();
        let mut nodes = vec![start.clone()];
        let mut edges = Vec::new();
        self.walk(pattern, end, &mut nodes, &mut edges, &mut out);
        out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.nodes.cmp(&b.nodes)));
        Ok(out)
    }

    fn walk(
        &self,
        pattern: &[PredicatePattern],
        end: Option<&EntityId>,
        nodes: &mut Vec<EntityId>,
        edges: &mut Vec<Triple>,
        out: &mut Vec<Path>,
    ) {
        let depth = edges.len();
        let here = nodes.last().expect("non-empty").clone();
        if depth == pattern.len() {
            if end.is_none_or(|e| *e == here) {
                out.push(Path { nodes: nodes.clone(), edges: edges.clone() });
            }
            return;
        }
        for t in self.outgoing(&here) {
            let Object::Entity(next) = &t.object else { continue };
            if !pattern[depth].matches(&t.predicate) || nodes.contains(next) {
                continue;
            }
            nodes.push(next.clone());
            edges.push(t.clone());
            self.walk(pattern, end, nodes, edges, out);
            nodes.pop();
            edges.pop();
        }
    }

    /// Adds a `same_as` bridge to `self` for every accepted link whose target
    /// lives in `kb`. `kb` is only read.
    pub fn merge_into(&mut self, kb: &KnowledgeGraph, links: &[EntityLink]) -> Result<MergeReport, KgError> {
        let mut report = MergeReport::default();
        for link in links {
            if !self.contains_entity(&link.source) {
                return Err(KgError::DanglingLink { link_id: link.link_id.clone(), endpoint: link.source.clone() });
            }
            if !kb.contains_entity(&link.target) {
                return Err(KgError::DanglingLink { link_id: link.link_id.clone(), endpoint: link.target.clone() });
            }
        }
        for link in links.iter().filter(|l| l.status == LinkStatus::Accepted) {
            let bridge = Triple::new(
                link.source.clone(),
                SAME_AS,
                link.target.clone(),
                link.score.clamp(0.0, 1.0),
                Provenance::Integration { link_id: link.link_id.clone() },
            );
            if self.add_triple(bridge)? {
                report.added += 1;
            } else {
                report.skipped += 1;
            }
        }
        Ok(report)
    }

    /// Serializes to the TSV snapshot format, one triple per line in
    /// insertion order.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# graph {}\n", self.graph_id);
        for t in &self.triples {
            out.push_str(&t.to_tsv());
            out.push('\n');
        }
        out
    }

    /// Parses a TSV snapshot. `#` lines and blank lines are skipped.
    pub fn from_tsv(graph_id: impl Into<String>, text: &str) -> Result<Self, KgError> {
        let mut g = KnowledgeGraph::new(graph_id);
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let t = parse_tsv_line(line).map_err(|reason| KgError::Snapshot { line: lineno, reason })?;
            g.add_triple(t).map_err(|e| KgError::Snapshot { line: lineno, reason: e.to_string() })?;
        }
        Ok(g)
    }

    /// Union of several graphs into a fresh read-only view.
    pub fn compose<'a>(graph_id: impl Into<String>, parts: impl IntoIterator<Item = &'a KnowledgeGraph>) -> Self {
        let mut g = KnowledgeGraph::new(graph_id);
        for part in parts {
            for t in &part.triples {
                g.add_triple(t.clone()).expect("source triples already validated");
            }
        }
        g
    }

    /// Sorted identity keys, for order-insensitive comparisons.
    pub fn key_set(&self) -> Vec<TripleKey> {
        let mut keys: Vec<TripleKey> = self.keys.iter().cloned().collect();
        keys.sort();
        keys
    }
}

fn parse_tsv_line(line: &str) -> Result<Triple, String> {
    let fields: Vec<&str> = line.splitn(5, '\t').collect();
    let [s, p, o, c, prov] = fields[..] else {
        return Err(format!("expected 5 tab-separated fields, found {}", fields.len()));
    };
    let subject: EntityId = s.parse().map_err(|e: KgError| e.to_string())?;
    let object = Object::from_token(o)?;
    let confidence: f64 = c.parse().map_err(|_| format!("bad confidence {c:?}"))?;
    let provenance: Provenance = serde_json::from_str(prov).map_err(|e| format!("bad provenance: {e}"))?;
    Ok(Triple::new(subject, p, object, confidence, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(s: &str) -> EntityId {
        s.parse().unwrap()
    }

    fn note(id: &str) -> Provenance {
        Provenance::ProviderNote { note_id: id.into(), span: (0, 4) }
    }

    fn edge(s: &str, p: &str, o: &str) -> Triple {
        Triple::new(e(s), p, e(o), 1.0, note("n1"))
    }

    #[test]
    fn entity_ids_are_canonical() {
        assert_eq!(e("kb:sertraline").label(), "sertraline");
        assert_eq!(e("kb:mayo/dry_mouth").label(), "dry mouth");
        assert_eq!(e("patient:p1").namespace(), Namespace::Patient);
        assert!("kb:Sertraline".parse::<EntityId>().is_err());
        assert!("kb:".parse::<EntityId>().is_err());
        assert!("kb:a b".parse::<EntityId>().is_err());
        assert!("drug:a".parse::<EntityId>().is_err());
        assert!("sertraline".parse::<EntityId>().is_err());
    }

    #[test]
    fn insert_and_deduplicate() {
        let mut g = KnowledgeGraph::new("p1");
        let t = edge("patient:p1", "takes", "kb:sertraline");
        assert!(g.add_triple(t.clone()).unwrap());
        assert!(!g.add_triple(t.clone()).unwrap());
        assert_eq!(g.len(), 1);

        let mut other = t.clone();
        other.provenance = note("n2");
        assert!(g.add_triple(other).unwrap());
        assert_eq!(g.len(), 2);
        // confidence is not part of identity
        let mut recon = t;
        recon.confidence = 0.5;
        assert!(!g.add_triple(recon).unwrap());
    }

    #[test]
    fn invalid_triples_name_the_field() {
        let mut g = KnowledgeGraph::new("g");
        let mut t = edge("patient:p1", "takes", "kb:x");
        t.confidence = 1.5;
        assert!(matches!(g.add_triple(t.clone()), Err(KgError::InvalidTriple { field: "confidence", .. })));
        t.confidence = 1.0;
        t.predicate = String::new();
        assert!(matches!(g.add_triple(t), Err(KgError::InvalidTriple { field: "predicate", .. })));
        assert!(g.is_empty());
    }

    #[test]
    fn single_edge_and_two_hop_paths() {
        let mut g = KnowledgeGraph::new("g");
        g.add_triple(edge("kb:a", "r", "kb:b")).unwrap();
        let p = g.find_paths(&e("kb:a"), &[PredicatePattern::exact("r")], Some(&e("kb:b")), 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].nodes, vec![e("kb:a"), e("kb:b")]);
        assert!(g.find_paths(&e("kb:a"), &[PredicatePattern::exact("q")], Some(&e("kb:b")), 1).unwrap().is_empty());

        g.add_triple(edge("kb:b", "s", "kb:c")).unwrap();
        let p = g
            .find_paths(&e("kb:a"), &[PredicatePattern::exact("r"), PredicatePattern::exact("s")], None, 2)
            .unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].nodes, vec![e("kb:a"), e("kb:b"), e("kb:c")]);
        assert!(p[0].is_well_formed());
    }

    #[test]
    fn find_paths_rejects_bad_queries() {
        let mut g = KnowledgeGraph::new("g");
        g.add_triple(edge("kb:a", "r", "kb:b")).unwrap();
        assert!(matches!(
            g.find_paths(&e("kb:zzz"), &[PredicatePattern::Any], None, 1),
            Err(KgError::UnknownEntity(_))
        ));
        assert!(g.find_paths(&e("kb:a"), &[PredicatePattern::Any], None, 0).is_err());
        assert!(g.find_paths(&e("kb:a"), &[PredicatePattern::Any], None, 7).is_err());
        assert!(g.find_paths(&e("kb:a"), &[PredicatePattern::Any, PredicatePattern::Any], None, 1).is_err());
    }

    #[test]
    fn paths_never_revisit_nodes() {
        let mut g = KnowledgeGraph::new("g");
        g.add_triple(edge("kb:a", "r", "kb:b")).unwrap();
        g.add_triple(edge("kb:b", "r", "kb:a")).unwrap();
        let p = g.find_paths(&e("kb:a"), &[PredicatePattern::Any, PredicatePattern::Any], None, 2).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn tsv_snapshot_round_trips() {
        let mut g = KnowledgeGraph::new("p1");
        g.add_triple(edge("patient:p1", "takes", "kb:sertraline")).unwrap();
        g.add_triple(Triple::new(
            e("kb:sertraline"),
            "dosage_mg",
            Literal::Number { value: 50.0, unit: Some("mg".into()) },
            1.0,
            note("n1"),
        ))
        .unwrap();
        g.add_triple(Triple::new(
            e("patient:p1"),
            "alias",
            Literal::String { value: "tab\there \"quoted\"".into() },
            0.3333333333333333,
            Provenance::ChatTurn { session_id: "s1".into(), message_id: "m1".into() },
        ))
        .unwrap();
        g.add_triple(Triple::new(
            e("patient:p1"),
            "seen_on",
            Literal::Date { value: NaiveDate::from_ymd_opt(2024, 3, 1).unwrap() },
            1.0,
            Provenance::KnowledgeBase { kb_id: "k".into(), record_id: "r".into() },
        ))
        .unwrap();
        let text = g.to_tsv();
        let back = KnowledgeGraph::from_tsv("p1", &text).unwrap();
        assert_eq!(back.triples(), g.triples());
        assert_eq!(back.to_tsv(), text);
    }

    #[test]
    fn tsv_errors_carry_line_numbers() {
        let err = KnowledgeGraph::from_tsv("g", "# c\n\nkb:a\tr\n").unwrap_err();
        assert!(matches!(err, KgError::Snapshot { line: 3, .. }));
    }
}
