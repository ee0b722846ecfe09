//! Safety-masked epsilon-greedy selection over response templates.
//!
//! Every reply is a one-step episode, so the value update has no
//! bootstrapping term: `q <- q + alpha * (reward - q)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{IntentKind, ResponseCandidate};

pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("no candidates survived the safety mask")]
    EmptyCandidateSet,
    #[error("reward must be +1 or -1, got {0}")]
    InvalidReward(f64),
    #[error("invalid policy parameter: {0}")]
    InvalidParameter(String),
    #[error("policy file: {0}")]
    PolicyFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationBucket {
    None,
    Flagged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdherenceBucket {
    Unknown,
    Behind,
    OnTrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PolicyState {
    pub intent: IntentKind,
    pub escalation: EscalationBucket,
    pub adherence: AdherenceBucket,
}

impl PolicyState {
    pub fn all() -> Vec<PolicyState> {
        let mut out = Vec::with_capacity(30);
        for intent in IntentKind::ALL {
            for escalation in [EscalationBucket::None, EscalationBucket::Flagged] {
                for adherence in [AdherenceBucket::Unknown, AdherenceBucket::Behind, AdherenceBucket::OnTrack] {
                    out.push(PolicyState { intent, escalation, adherence });
                }
            }
        }
        out
    }
}

impl fmt::Display for PolicyState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("state encodes");
        write!(f, "{}|{}|{}", s["intent"].as_str().unwrap(), s["escalation"].as_str().unwrap(), s["adherence"].as_str().unwrap())
    }
}

impl FromStr for PolicyState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('|').collect();
        let [i, e, a] = parts[..] else { return Err(format!("bad policy state {s:?}")) };
        let v = serde_json::json!({ "intent": i, "escalation": e, "adherence": a });
        serde_json::from_value(v).map_err(|err| format!("bad policy state {s:?}: {err}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackSource {
    Patient,
    Clinician,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Positive,
    Negative,
}

impl Signal {
    pub fn reward(self) -> f64 {
        match self {
            Signal::Positive => 1.0,
            Signal::Negative => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub session_id: String,
    pub message_id: String,
    pub source: FeedbackSource,
    pub signal: Signal,
}

impl FeedbackEvent {
    pub fn reward(&self) -> f64 {
        self.signal.reward()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePolicy {
    pub epsilon: f64,
    pub alpha: f64,
    /// Step-size multiplier for clinician feedback.
    pub clinician_weight: f64,
    cells: BTreeMap<(PolicyState, String), Cell>,
}

impl Default for ResponsePolicy {
    fn default() -> Self {
        ResponsePolicy { epsilon: DEFAULT_EPSILON, alpha: DEFAULT_ALPHA, clinician_weight: 1.0, cells: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub explored: bool,
}

impl ResponsePolicy {
    pub fn new(epsilon: f64, alpha: f64) -> Result<Self, PolicyError> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(PolicyError::InvalidParameter(format!("epsilon {epsilon} outside [0, 1]")));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(PolicyError::InvalidParameter(format!("alpha {alpha} outside (0, 1]")));
        }
        Ok(ResponsePolicy { epsilon, alpha, ..Default::default() })
    }

    pub fn with_clinician_weight(mut self, w: f64) -> Result<Self, PolicyError> {
        if !(w.is_finite() && w > 0.0) {
            return Err(PolicyError::InvalidParameter(format!("clinician weight {w}")));
        }
        self.clinician_weight = w;
        Ok(self)
    }

    pub fn q(&self, state: PolicyState, template_id: &str) -> f64 {
        self.cell(state, template_id).value
    }

    pub fn cell(&self, state: PolicyState, template_id: &str) -> Cell {
        self.cells.get(&(state, template_id.to_string())).copied().unwrap_or_default()
    }

    pub fn cells(&self) -> impl Iterator<Item = (&PolicyState, &str, &Cell)> {
        self.cells.iter().map(|((s, t), c)| (s, t.as_str(), c))
    }

    /// Overwrites one cell; used when rebuilding from a log or snapshot.
    pub fn set_cell(&mut self, state: PolicyState, template_id: &str, cell: Cell) {
        self.cells.insert((state, template_id.to_string()), cell);
    }

    /// Greedy choice among `template_ids`: highest q, ties to the
    /// lexicographically smallest id.
    pub fn greedy<'a>(&self, state: PolicyState, template_ids: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
        template_ids.into_iter().fold(None, |best: Option<&'a str>, t| match best {
            None => Some(t),
            Some(b) => {
                let (qt, qb) = (self.q(state, t), self.q(state, b));
                if qt > qb || (qt == qb && t < b) {
                    Some(t)
                } else {
                    Some(b)
                }
            }
        })
    }

    pub fn select_with<R: Rng + ?Sized>(
        &self,
        state: PolicyState,
        template_ids: &[&str],
        rng: &mut R,
    ) -> Result<Selection, PolicyError> {
        if template_ids.is_empty() {
            return Err(PolicyError::EmptyCandidateSet);
        }
        let draw: f64 = rng.gen();
        if draw < self.epsilon {
            return Ok(Selection { index: rng.gen_range(0..template_ids.len()), explored: true });
        }
        let best = self.greedy(state, template_ids.iter().copied()).expect("non-empty");
        let index = template_ids.iter().position(|t| *t == best).expect("chosen from list");
        Ok(Selection { index, explored: false })
    }

    /// Applies one reward to one cell and returns the new value.
    pub fn update(&mut self, state: PolicyState, template_id: &str, reward: f64) -> Result<f64, PolicyError> {
        self.update_weighted(state, template_id, reward, 1.0)
    }

    pub fn update_from(&mut self, state: PolicyState, template_id: &str, fb: &FeedbackEvent) -> Result<f64, PolicyError> {
        let weight = match fb.source {
            FeedbackSource::Patient => 1.0,
            FeedbackSource::Clinician => self.clinician_weight,
        };
        self.update_weighted(state, template_id, fb.reward(), weight)
    }

    fn update_weighted(&mut self, state: PolicyState, template_id: &str, reward: f64, weight: f64) -> Result<f64, PolicyError> {
        if reward != 1.0 && reward != -1.0 {
            return Err(PolicyError::InvalidReward(reward));
        }
        let step = (self.alpha * weight).min(1.0);
        let cell = self.cells.entry((state, template_id.to_string())).or_default();
        cell.value += step * (reward - cell.value);
        cell.count += 1;
        Ok(cell.value)
    }

    pub fn to_json(&self) -> String {
        let file = PolicyFile {
            epsilon: self.epsilon,
            alpha: self.alpha,
            q: self
                .cells
                .iter()
                .map(|((state, template_id), c)| PolicyEntry {
                    state: *state,
                    template_id: template_id.clone(),
                    value: c.value,
                    count: c.count,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("policy encodes")
    }

    pub fn from_json(json: &str) -> Result<Self, PolicyError> {
        let file: PolicyFile = serde_json::from_str(json).map_err(|e| PolicyError::PolicyFile(e.to_string()))?;
        let mut p = ResponsePolicy::new(file.epsilon, file.alpha)?;
        for e in file.q {
            if !e.value.is_finite() {
                return Err(PolicyError::PolicyFile(format!("non-finite q for {}", e.template_id)));
            }
            p.set_cell(e.state, &e.template_id, Cell { value: e.value, count: e.count });
        }
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    epsilon: f64,
    alpha: f64,
    q: Vec<PolicyEntry>,
}

#[derive(Serialize, Deserialize)]
struct PolicyEntry {
    state: PolicyState,
    template_id: String,
    value: f64,
    count: u64,
}

/// Epsilon-greedy choice among safety survivors, deterministic for a seed.
pub fn select_response<'a>(
    state: PolicyState,
    survivors: &'a [ResponseCandidate],
    policy: &ResponsePolicy,
    rng_seed: u64,
) -> Result<(&'a ResponseCandidate, Selection), PolicyError> {
    let ids: Vec<&str> = survivors.iter().map(|c| c.template_id.as_str()).collect();
    let sel = policy.select_with(state, &ids, &mut ChaCha8Rng::seed_from_u64(rng_seed))?;
    Ok((&survivors[sel.index], sel))
}

pub fn update_policy(policy: &mut ResponsePolicy, state: PolicyState, template_id: &str, reward: f64) -> Result<f64, PolicyError> {
    policy.update(state, template_id, reward)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTemplate {
    pub template_id: String,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedTemplate {
    pub template_id: String,
    pub violated: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionExplanation {
    pub state: PolicyState,
    pub chosen: String,
    pub explored: bool,
    pub survivors: Vec<ScoredTemplate>,
    pub masked: Vec<MaskedTemplate>,
}

pub fn explain_selection(
    state: PolicyState,
    chosen: &str,
    selection: Selection,
    policy: &ResponsePolicy,
    survivors: &[ResponseCandidate],
    masked: &[MaskedTemplate],
) -> SelectionExplanation {
    SelectionExplanation {
        state,
        chosen: chosen.to_string(),
        explored: selection.explored,
        survivors: survivors
            .iter()
            .map(|c| ScoredTemplate { template_id: c.template_id.clone(), q: policy.q(state, &c.template_id) })
            .collect(),
        masked: masked.to_vec(),
    }
}
