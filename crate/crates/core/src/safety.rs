//! REQUIRE/FORBID path constraints gating dialogue actions.
//!
//! Rule files are line oriented:
//!
//! ```text
//! # medication advice needs a prescription on file
//! RULE med_rx ON medication_advice REQUIRE PATH $patient -[takes]-> ?drug
//! RULE med_allergy ON medication_advice FORBID PATH $patient -[allergic_to]-> ?drug
//! ```
//!
//! A `Require` rule is satisfied when at least one matching path exists
//! under the bindings; free variables are existential. A `Forbid` rule is
//! violated by any matching path.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, Path, PredicatePattern, MAX_PATH_LEN};

pub const PATIENT_VAR: &str = "$patient";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionType {
    MedicationAdvice,
    AdherencePraise,
    AdherenceEncourage,
    HypothesisOffer,
    Smalltalk,
    EmergencyAlert,
    Clarify,
}

impl ActionType {
    pub const ALL: [ActionType; 7] = [
        ActionType::MedicationAdvice,
        ActionType::AdherencePraise,
        ActionType::AdherenceEncourage,
        ActionType::HypothesisOffer,
        ActionType::Smalltalk,
        ActionType::EmergencyAlert,
        ActionType::Clarify,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionType::MedicationAdvice => "medication_advice",
            ActionType::AdherencePraise => "adherence_praise",
            ActionType::AdherenceEncourage => "adherence_encourage",
            ActionType::HypothesisOffer => "hypothesis_offer",
            ActionType::Smalltalk => "smalltalk",
            ActionType::EmergencyAlert => "emergency_alert",
            ActionType::Clarify => "clarify",
        }
    }
}

impl FromStr for ActionType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionType::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown action type {s:?}"))
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Require,
    Forbid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Entity(EntityId),
    /// `?name`, stored with its sigil.
    Var(String),
    Patient,
}

impl Term {
    fn binding_key(&self) -> Option<&str> {
        match self {
            Term::Entity(_) => None,
            Term::Var(v) => Some(v),
            Term::Patient => Some(PATIENT_VAR),
        }
    }

    fn resolve<'a>(&'a self, bindings: &'a Bindings) -> Option<&'a EntityId> {
        match self {
            Term::Entity(e) => Some(e),
            _ => self.binding_key().and_then(|k| bindings.get(k)),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Entity(e) => write!(f, "{e}"),
            Term::Var(v) => f.write_str(v),
            Term::Patient => f.write_str(PATIENT_VAR),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathConstraint {
    pub name: String,
    pub action_type: ActionType,
    pub mode: Mode,
    pub start: Term,
    pub predicates: Vec<PredicatePattern>,
    pub end: Term,
}

impl fmt::Display for PathConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Require => "REQUIRE",
            Mode::Forbid => "FORBID",
        };
        let preds: Vec<String> = self.predicates.iter().map(ToString::to_string).collect();
        write!(
            f,
            "RULE {} ON {} {} PATH {} -[{}]-> {}",
            self.name,
            self.action_type,
            mode,
            self.start,
            preds.join(","),
            self.end
        )
    }
}

/// Renders a rule set back into the file format.
pub fn render_constraints(rules: &[PathConstraint]) -> String {
    rules.iter().map(|r| format!("{r}\n")).collect()
}

/// Variable name (with sigil) to entity.
pub type Bindings = BTreeMap<String, EntityId>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SafetyError {
    #[error("line {line}, column {column}: expected {expected}, found {found}")]
    ParseError { line: usize, column: usize, expected: String, found: String },
    #[error("unbound variable {0}")]
    UnboundVariable(String),
}

struct Cursor<'a> {
    line: usize,
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.text[self.pos..].chars().next() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn column(&self) -> usize {
        self.text[..self.pos].chars().count() + 1
    }

    fn error(&self, expected: &str) -> SafetyError {
        let rest = &self.text[self.pos..];
        let found = if rest.is_empty() {
            "end of line".to_string()
        } else {
            format!("{:?}", rest.split_whitespace().next().unwrap_or(rest))
        };
        SafetyError::ParseError { line: self.line, column: self.column(), expected: expected.to_string(), found }
    }

    /// Reads a maximal run of characters accepted by `ok`.
    fn token(&mut self, ok: impl Fn(char) -> bool) -> &'a str {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.text[self.pos..].chars().next() {
            if !ok(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
        &self.text[start..self.pos]
    }

    fn keyword(&mut self, kw: &str) -> Result<(), SafetyError> {
        self.skip_ws();
        let save = self.pos;
        if self.token(is_word) == kw {
            Ok(())
        } else {
            self.pos = save;
            Err(self.error(kw))
        }
    }

    fn punct(&mut self, p: &str) -> Result<(), SafetyError> {
        self.skip_ws();
        if self.text[self.pos..].starts_with(p) {
            self.pos += p.len();
            Ok(())
        } else {
            Err(self.error(&format!("{p:?}")))
        }
    }

    fn ident(&mut self, what: &str) -> Result<&'a str, SafetyError> {
        self.skip_ws();
        let save = self.pos;
        let t = self.token(is_word);
        if t.is_empty() {
            self.pos = save;
            return Err(self.error(what));
        }
        Ok(t)
    }

    fn term(&mut self) -> Result<Term, SafetyError> {
        self.skip_ws();
        let save = self.pos;
        let mut t = self.token(|c| !c.is_whitespace());
        if let Some(cut) = t.find("-[") {
            self.pos -= t.len() - cut;
            t = &t[..cut];
        }
        let term = if t == PATIENT_VAR {
            Some(Term::Patient)
        } else if let Some(v) = t.strip_prefix('?') {
            (!v.is_empty() && v.chars().all(is_word)).then(|| Term::Var(t.to_string()))
        } else {
            t.parse::<EntityId>().ok().map(Term::Entity)
        };
        term.ok_or_else(|| {
            self.pos = save;
            self.error("term ($patient, ?var or namespace:id)")
        })
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos == self.text.len()
    }
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn is_predicate_char(c: char) -> bool {
    is_word(c) || c == '*'
}

/// Parses a rule file. Blank lines and `#` comments are ignored; rules come
/// back in file order.
pub fn parse_constraints(text: &str) -> Result<Vec<PathConstraint>, SafetyError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let body = raw.split('#').next().unwrap_or("");
        if body.trim().is_empty() {
            continue;
        }
        let mut cur = Cursor { line: i + 1, text: body, pos: 0 };
        out.push(parse_rule(&mut cur)?);
    }
    Ok(out)
}

fn parse_rule(cur: &mut Cursor<'_>) -> Result<PathConstraint, SafetyError> {
    cur.keyword("RULE")?;
    let name = cur.ident("rule name")?.to_string();
    cur.keyword("ON")?;
    let save = cur.pos;
    let action_type = cur.ident("action type")?.parse::<ActionType>().map_err(|_| {
        cur.pos = save;
        cur.skip_ws();
        cur.error("action type")
    })?;
    cur.skip_ws();
    let save = cur.pos;
    let mode = match cur.token(is_word) {
        "REQUIRE" => Mode::Require,
        "FORBID" => Mode::Forbid,
        _ => {
            cur.pos = save;
            return Err(cur.error("REQUIRE or FORBID"));
        }
    };
    cur.keyword("PATH")?;
    let start = cur.term()?;
    cur.punct("-[")?;
    let mut predicates = Vec::new();
    loop {
        cur.skip_ws();
        let save = cur.pos;
        let p = cur.token(is_predicate_char);
        let pat = match p {
            "*" => PredicatePattern::Any,
            _ if !p.is_empty() && p.chars().all(is_word) => PredicatePattern::Exact(p.to_string()),
            _ => {
                cur.pos = save;
                return Err(cur.error("predicate or *"));
            }
        };
        predicates.push(pat);
        if predicates.len() > MAX_PATH_LEN {
            cur.pos = save;
            return Err(cur.error(&format!("at most {MAX_PATH_LEN} predicates")));
        }
        cur.skip_ws();
        if cur.punct(",").is_err() {
            break;
        }
    }
    cur.punct("]->")?;
    let end = cur.term()?;
    if !cur.at_end() {
        return Err(cur.error("end of rule"));
    }
    Ok(PathConstraint { name, action_type, mode, start, predicates, end })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Allowed,
    Denied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub constraint: String,
    pub path: Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    /// One shortest satisfying path per Require rule, in rule order.
    pub evidence: Vec<Evidence>,
    pub violated: Option<String>,
    /// For a violated Forbid rule, the offending path.
    pub witness: Option<Path>,
}

impl Verdict {
    pub fn is_allowed(&self) -> bool {
        self.decision == Decision::Allowed
    }

    pub fn paths(&self) -> Vec<Path> {
        self.evidence.iter().map(|e| e.path.clone()).collect()
    }

    fn denied(rule: &PathConstraint, witness: Option<Path>) -> Self {
        Verdict { decision: Decision::Denied, evidence: Vec::new(), violated: Some(rule.name.clone()), witness }
    }
}

/// Paths satisfying `rule` under `bindings`, shortest first.
pub fn satisfying_paths(
    rule: &PathConstraint,
    bindings: &Bindings,
    graph: &KnowledgeGraph,
) -> Result<Vec<Path>, SafetyError> {
    let start = rule.start.resolve(bindings).ok_or_else(|| {
        SafetyError::UnboundVariable(rule.start.binding_key().unwrap_or_default().to_string())
    })?;
    let end = match (&rule.end, rule.end.resolve(bindings)) {
        (_, Some(e)) => Some(e),
        (Term::Var(v), None) if rule.start == rule.end => {
            return Err(SafetyError::UnboundVariable(v.clone()));
        }
        (_, None) => None,
    };
    if !graph.contains_entity(start) {
        return Ok(Vec::new());
    }
    Ok(graph
        .find_paths(start, &rule.predicates, end, rule.predicates.len().max(1))
        .unwrap_or_default())
}

/// Evaluates every rule for `action` in file order. The first failing rule
/// decides a denial.
pub fn check_action(
    action: ActionType,
    bindings: &Bindings,
    graph: &KnowledgeGraph,
    constraints: &[PathConstraint],
) -> Result<Verdict, SafetyError> {
    let relevant: Vec<&PathConstraint> = constraints.iter().filter(|c| c.action_type == action).collect();
    if !relevant.is_empty() && !bindings.contains_key(PATIENT_VAR) {
        return Err(SafetyError::UnboundVariable(PATIENT_VAR.to_string()));
    }
    let mut evidence = Vec::new();
    for rule in relevant {
        let paths = satisfying_paths(rule, bindings, graph)?;
        match rule.mode {
            Mode::Require => match paths.into_iter().next() {
                Some(path) => evidence.push(Evidence { constraint: rule.name.clone(), path }),
                None => return Ok(Verdict::denied(rule, None)),
            },
            Mode::Forbid => {
                if let Some(path) = paths.into_iter().next() {
                    return Ok(Verdict::denied(rule, Some(path)));
                }
            }
        }
    }
    Ok(Verdict { decision: Decision::Allowed, evidence, violated: None, witness: None })
}
