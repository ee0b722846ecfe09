//! Questionnaire trees for alarming-behavior screening.
//!
//! A tree orders concept nodes by strictly increasing severity from the
//! root. Utterances are matched to nodes by embedding similarity and a
//! session keeps the maximum confirmed severity, which never decays.

use std::collections::{BTreeSet, HashMap, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link::{embed, EmbeddingVector};

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.70;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScreenerError {
    #[error("tree validation failed ({reason}): {nodes:?}")]
    TreeValidationError { reason: String, nodes: Vec<String> },
    #[error("tree file: {0}")]
    TreeFile(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub node_id: String,
    pub label: String,
    pub concept_phrases: Vec<String>,
    pub severity: u32,
    #[serde(default)]
    pub children: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TreeFile {
    tree_id: String,
    root: String,
    nodes: Vec<TreeNode>,
}

#[derive(Debug, Clone)]
pub struct QuestionnaireTree {
    pub tree_id: String,
    pub root: String,
    pub nodes: Vec<TreeNode>,
    index: HashMap<String, usize>,
    phrase_vectors: Vec<Vec<EmbeddingVector>>,
}

fn invalid(reason: &str, nodes: impl IntoIterator<Item = String>) -> ScreenerError {
    ScreenerError::TreeValidationError { reason: reason.to_string(), nodes: nodes.into_iter().collect() }
}

impl QuestionnaireTree {
    pub fn new(tree_id: String, root: String, nodes: Vec<TreeNode>) -> Result<Self, ScreenerError> {
        let mut index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.node_id.clone(), i).is_some() {
                return Err(invalid("duplicate node id", [n.node_id.clone()]));
            }
            if n.concept_phrases.iter().all(|p| p.trim().is_empty()) {
                return Err(invalid("node without concept phrases", [n.node_id.clone()]));
            }
            if n.severity < 1 {
                return Err(invalid("severity below 1", [n.node_id.clone()]));
            }
        }
        if !index.contains_key(&root) {
            return Err(invalid("root missing", [root]));
        }
        let mut parent: HashMap<&str, &str> = HashMap::new();
        for n in &nodes {
            for c in &n.children {
                let Some(&ci) = index.get(c) else {
                    return Err(invalid("child not defined", [n.node_id.clone(), c.clone()]));
                };
                if c == &root {
                    return Err(invalid("cycle through root", [n.node_id.clone(), c.clone()]));
                }
                if let Some(prev) = parent.insert(c, &n.node_id) {
                    return Err(invalid("node has two parents", [prev.to_string(), n.node_id.clone(), c.clone()]));
                }
                if nodes[ci].severity <= n.severity {
                    return Err(invalid("severity does not increase", [n.node_id.clone(), c.clone()]));
                }
            }
        }
        // With one parent per node and strictly increasing severity there
        // can be no cycle, so anything unreachable is an orphan.
        let mut seen = HashSet::new();
        let mut stack = vec![root.as_str()];
        while let Some(id) = stack.pop() {
            if seen.insert(id) {
                stack.extend(nodes[index[id]].children.iter().map(String::as_str));
            }
        }
        let mut orphans: Vec<String> =
            nodes.iter().filter(|n| !seen.contains(n.node_id.as_str())).map(|n| n.node_id.clone()).collect();
        if !orphans.is_empty() {
            orphans.sort();
            return Err(invalid("unreachable from root", orphans));
        }
        let phrase_vectors =
            nodes.iter().map(|n| n.concept_phrases.iter().map(|p| embed(p)).collect()).collect();
        Ok(QuestionnaireTree { tree_id, root, nodes, index, phrase_vectors })
    }

    pub fn node(&self, id: &str) -> Option<&TreeNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TreeFile {
            tree_id: self.tree_id.clone(),
            root: self.root.clone(),
            nodes: self.nodes.clone(),
        })
        .expect("tree encodes")
    }
}

/// Parses and validates a tree file.
pub fn load_tree(json: &str) -> Result<QuestionnaireTree, ScreenerError> {
    let file: TreeFile = serde_json::from_str(json).map_err(|e| ScreenerError::TreeFile(e.to_string()))?;
    QuestionnaireTree::new(file.tree_id, file.root, file.nodes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMatch {
    pub node_id: String,
    pub score: f64,
    /// Phrase that produced the score.
    pub phrase: String,
}

/// Nodes whose best phrase similarity reaches `threshold`, sorted by
/// (severity desc, score desc, node id).
pub fn match_concepts(utterance: &str, tree: &QuestionnaireTree, threshold: f64) -> Result<Vec<ConceptMatch>, ScreenerError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(ScreenerError::InvalidThreshold(threshold));
    }
    let u = embed(utterance);
    let mut out: Vec<(u32, ConceptMatch)> = Vec::new();
    for (node, vectors) in tree.nodes.iter().zip(&tree.phrase_vectors) {
        let best = node
            .concept_phrases
            .iter()
            .zip(vectors)
            .map(|(p, v)| (p, u.cosine(v)))
            .fold(None::<(&String, f64)>, |acc, (p, s)| match acc {
                Some((_, b)) if b >= s => acc,
                _ => Some((p, s)),
            });
        if let Some((phrase, score)) = best.filter(|(_, s)| *s >= threshold) {
            out.push((node.severity, ConceptMatch { node_id: node.node_id.clone(), score, phrase: phrase.clone() }));
        }
    }
    out.sort_by(|(sa, a), (sb, b)| sb.cmp(sa).then(b.score.total_cmp(&a.score)).then_with(|| a.node_id.cmp(&b.node_id)));
    Ok(out.into_iter().map(|(_, m)| m).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Escalation {
    #[default]
    None,
    ClinicianFlag,
    Emergency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub flag_at: u32,
    pub emergency_at: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { flag_at: 1, emergency_at: 4 }
    }
}

impl Thresholds {
    pub fn escalation_for(&self, level: u32) -> Escalation {
        if level >= self.emergency_at {
            Escalation::Emergency
        } else if level >= self.flag_at && level > 0 {
            Escalation::ClinicianFlag
        } else {
            Escalation::None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedNode {
    pub node_id: String,
    pub message_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeState {
    pub tree_id: String,
    pub session_id: String,
    pub confirmed_level: u32,
    pub matched_nodes: Vec<MatchedNode>,
    pub escalation: Escalation,
}

impl TreeState {
    pub fn new(tree_id: &str, session_id: &str) -> Self {
        TreeState {
            tree_id: tree_id.to_string(),
            session_id: session_id.to_string(),
            confirmed_level: 0,
            matched_nodes: Vec::new(),
            escalation: Escalation::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertLevel {
    ClinicianFlag,
    Emergency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvidence {
    pub message_id: String,
    pub phrase: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: String,
    pub session_id: String,
    pub level: AlertLevel,
    pub triggering_node: String,
    pub evidence: AlertEvidence,
    pub created_at: DateTime<Utc>,
}

/// Folds one utterance's matches into the session state. An alert is
/// returned exactly when the escalation rises.
pub fn advance(
    state: &TreeState,
    tree: &QuestionnaireTree,
    matches: &[ConceptMatch],
    message_id: &str,
    thresholds: Thresholds,
    now: DateTime<Utc>,
) -> Result<(TreeState, Option<Alert>), ScreenerError> {
    let mut strongest: Option<(&ConceptMatch, u32)> = None;
    for m in matches {
        let node = tree.node(&m.node_id).ok_or_else(|| ScreenerError::UnknownNode(m.node_id.clone()))?;
        let better = match strongest {
            None => true,
            Some((b, sev)) => {
                node.severity > sev
                    || (node.severity == sev && (m.score > b.score || (m.score == b.score && m.node_id < b.node_id)))
            }
        };
        if better {
            strongest = Some((m, node.severity));
        }
    }
    let mut next = state.clone();
    next.matched_nodes.extend(matches.iter().map(|m| MatchedNode {
        node_id: m.node_id.clone(),
        message_id: message_id.to_string(),
        score: m.score,
    }));
    let Some((top, severity)) = strongest else {
        return Ok((next, None));
    };
    next.confirmed_level = next.confirmed_level.max(severity);
    let escalation = thresholds.escalation_for(next.confirmed_level).max(state.escalation);
    next.escalation = escalation;
    if escalation <= state.escalation {
        return Ok((next, None));
    }
    let level = match escalation {
        Escalation::Emergency => AlertLevel::Emergency,
        _ => AlertLevel::ClinicianFlag,
    };
    let alert = Alert {
        alert_id: format!("alert-{}-{}", state.session_id, message_id),
        session_id: state.session_id.clone(),
        level,
        triggering_node: top.node_id.clone(),
        evidence: AlertEvidence { message_id: message_id.to_string(), phrase: top.phrase.clone(), score: top.score },
        created_at: now,
    };
    Ok((next, Some(alert)))
}

/// Severities along the longest root-to-leaf path.
pub fn deepest_path_severities(tree: &QuestionnaireTree) -> Vec<u32> {
    fn go(tree: &QuestionnaireTree, id: &str) -> Vec<u32> {
        let node = tree.node(id).expect("validated");
        let mut best = node
            .children
            .iter()
            .map(|c| go(tree, c))
            .max_by_key(Vec::len)
            .unwrap_or_default();
        best.insert(0, node.severity);
        best
    }
    go(tree, &tree.root)
}

/// Distinct severities present in a tree.
pub fn severity_levels(tree: &QuestionnaireTree) -> BTreeSet<u32> {
    tree.nodes.iter().map(|n| n.severity).collect()
}
