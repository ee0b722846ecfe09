//! Reference implementations written without the library's helpers, used
//! to cross-check it. Shared by several test targets.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use alleviate_core::kg::{EntityId, KnowledgeGraph, Object, Path, Triple};
use serde_json::Value;

// ---- embedding ----

pub fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(1099511628211);
    }
    h
}

/// Sparse bucket counts, keyed by bucket.
pub fn buckets(text: &str) -> HashMap<usize, f64> {
    let mut m = HashMap::new();
    if text.is_empty() {
        return m;
    }
    let s: Vec<char> = format!("#{}#", text.to_lowercase()).chars().collect();
    let mut i = 0;
    while i + 3 <= s.len() {
        let tri: String = s[i..i + 3].iter().collect();
        *m.entry((fnv(tri.as_bytes()) % 256) as usize).or_insert(0.0) += 1.0;
        i += 1;
    }
    m
}

pub fn cos(a: &str, b: &str) -> f64 {
    let (va, vb) = (buckets(a), buckets(b));
    let na: f64 = va.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = vb.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = va.iter().map(|(k, x)| x * vb.get(k).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

fn label(id: &str) -> String {
    id.rsplit('/').next().unwrap().split(':').last().unwrap().replace('_', " ")
}

// ---- linking ----

#[derive(Debug, Clone, PartialEq)]
pub struct OracleLink {
    pub source: String,
    pub target: String,
    pub kb: String,
    pub score: f64,
    /// "accepted" or the id of the rejecting rule
    pub decision: String,
}

/// All-pairs linking of `mentions` (kb: ids) against every entity of every
/// `(kb id, TSV text)`, resolved with an optional preferred KB under rule id
/// `prefer_rule`, then highest score, then one link per source.
pub fn link_all_pairs(mentions: &[String], kbs: &[(String, String)], threshold: f64, prefer: Option<(&str, &str)>) -> Vec<OracleLink> {
    let mut entities: Vec<(String, String)> = Vec::new();
    for (kb, tsv) in kbs {
        for line in tsv.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            for c in [cols[0], cols[2]] {
                if c.starts_with("kb:") && !entities.iter().any(|(k, e)| k == kb && e == c) {
                    entities.push((kb.clone(), c.to_string()));
                }
            }
        }
    }
    let mut out = Vec::new();
    let mut sorted = mentions.to_vec();
    sorted.sort();
    sorted.dedup();
    for m in &sorted {
        let mut cands: Vec<OracleLink> = entities
            .iter()
            .map(|(kb, e)| OracleLink {
                source: m.clone(),
                target: e.clone(),
                kb: kb.clone(),
                score: cos(&label(m), &label(e)),
                decision: String::new(),
            })
            .filter(|l| l.score >= threshold)
            .collect();
        if let Some((kb, rule)) = prefer {
            if cands.iter().any(|l| l.kb == kb) {
                for l in cands.iter_mut().filter(|l| l.kb != kb) {
                    l.decision = rule.to_string();
                }
            }
        }
        let best = cands.iter().filter(|l| l.decision.is_empty()).map(|l| l.score).fold(f64::MIN, f64::max);
        for l in cands.iter_mut().filter(|l| l.decision.is_empty() && l.score < best) {
            l.decision = "PreferHighestScore".into();
        }
        let winner = cands.iter().filter(|l| l.decision.is_empty()).map(|l| l.target.clone()).min();
        for l in cands.iter_mut().filter(|l| l.decision.is_empty()) {
            l.decision = if Some(&l.target) == winner.as_ref() { "accepted".into() } else { "MaxLinksPerEntity".into() };
        }
        out.extend(cands);
    }
    out.sort_by(|a, b| (&a.source, &a.target).cmp(&(&b.source, &b.target)));
    out
}

// ---- paths ----

/// Every chain of exactly `pattern.len()` edges, enumerated over the full
/// triple list, with distinct nodes. `None` in `pattern` matches anything.
pub fn brute_force_paths(g: &KnowledgeGraph, start: &EntityId, pattern: &[Option<&str>], end: Option<&EntityId>) -> Vec<Path> {
    let edges: Vec<&Triple> = g.triples().iter().filter(|t| matches!(t.object, Object::Entity(_))).collect();
    let n = pattern.len();
    let mut out = Vec::new();
    let total = edges.len().pow(n as u32);
    for mut code in 0..total {
        let mut chosen = Vec::with_capacity(n);
        for _ in 0..n {
            chosen.push(edges[code % edges.len()]);
            code /= edges.len();
        }
        let mut nodes = vec![start.clone()];
        let mut ok = true;
        for (i, t) in chosen.iter().enumerate() {
            let next = t.object.as_entity().unwrap();
            if &t.subject != nodes.last().unwrap()
                || pattern[i].is_some_and(|p| p != t.predicate)
                || nodes.contains(next)
            {
                ok = false;
                break;
            }
            nodes.push(next.clone());
        }
        if ok && end.is_none_or(|e| nodes.last() == Some(e)) {
            out.push(Path { nodes, edges: chosen.into_iter().cloned().collect() });
        }
    }
    if n == 0 && g.contains_entity(start) && end.is_none_or(|e| e == start) {
        out.push(Path::single(start.clone()));
    }
    out
}

/// Order-insensitive comparison key for a path set.
pub fn path_keys(paths: &[Path]) -> Vec<String> {
    let mut v: Vec<String> = paths
        .iter()
        .map(|p| p.edges.iter().map(|e| format!("{}|{}|{}|{}", e.subject, e.predicate, e.object.to_token(), e.provenance.to_json())).collect::<Vec<_>>().join(" ; "))
        .collect();
    v.sort();
    v
}

// ---- screener ----

#[derive(Debug, Clone, PartialEq)]
pub struct OracleStep {
    pub confirmed_level: u32,
    /// 0 none, 1 flag, 2 emergency
    pub escalation: u8,
    /// (level, node) when the escalation rose on this step
    pub alert: Option<(u8, String)>,
}

pub struct OracleTree {
    nodes: Vec<(String, u32, Vec<String>)>,
}

impl OracleTree {
    pub fn from_json(json: &str) -> Self {
        let v: Value = serde_json::from_str(json).unwrap();
        let nodes = v["nodes"]
            .as_array()
            .unwrap()
            .iter()
            .map(|n| {
                (
                    n["node_id"].as_str().unwrap().to_string(),
                    n["severity"].as_u64().unwrap() as u32,
                    n["concept_phrases"].as_array().unwrap().iter().map(|p| p.as_str().unwrap().to_string()).collect(),
                )
            })
            .collect();
        OracleTree { nodes }
    }

    /// Best phrase score per node, for nodes at or above `threshold`.
    pub fn matches(&self, utterance: &str, threshold: f64) -> BTreeMap<String, (u32, f64)> {
        let mut out = BTreeMap::new();
        for (id, sev, phrases) in &self.nodes {
            let best = phrases.iter().map(|p| cos(utterance, p)).fold(f64::MIN, f64::max);
            if best >= threshold {
                out.insert(id.clone(), (*sev, best));
            }
        }
        out
    }

    pub fn trace(&self, utterances: &[&str], threshold: f64, flag_at: u32, emergency_at: u32) -> Vec<OracleStep> {
        let esc = |level: u32| -> u8 {
            if level >= emergency_at {
                2
            } else if level >= flag_at && level > 0 {
                1
            } else {
                0
            }
        };
        let mut level = 0;
        let mut current = 0u8;
        let mut out = Vec::new();
        for u in utterances {
            let m = self.matches(u, threshold);
            let mut alert = None;
            if let Some(top_sev) = m.values().map(|(s, _)| *s).max() {
                level = level.max(top_sev);
                let next = esc(level).max(current);
                if next > current {
                    // strongest match: highest severity, then score, then id
                    let mut best: Vec<(&String, &(u32, f64))> = m.iter().filter(|(_, (s, _))| *s == top_sev).collect();
                    best.sort_by(|a, b| b.1 .1.total_cmp(&a.1 .1).then_with(|| a.0.cmp(b.0)));
                    alert = Some((next, best[0].0.clone()));
                }
                current = next;
            }
            out.push(OracleStep { confirmed_level: level, escalation: current, alert });
        }
        out
    }
}
