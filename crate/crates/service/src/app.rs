use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use alleviate_core::engine::{Engine, EngineError, EngineEvent};
use alleviate_core::kg::EntityId;
use alleviate_core::policy::ResponsePolicy;
use alleviate_core::screeners::Alert;
use serde::Serialize;
use thiserror::Error;

use crate::clock::Clock;
use crate::config::{ConfigError, ServiceConfig};
use crate::eventlog::{EventLog, LogContents, LogError};
use crate::webhook::{recorded_alert_ids, Notifier};

pub const POLICY_SNAPSHOT_EVERY: u64 = 100;

#[derive(Debug, Error)]
pub enum StartError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{path}: {message}")]
    Snapshot { path: PathBuf, message: String },
}

pub struct App {
    pub config: ServiceConfig,
    pub engine: Engine,
    pub log: EventLog,
    pub notifier: Notifier,
    pub clock: Arc<Clock>,
    pub started: Instant,
    /// Alerts restored from the log that never reached either outcome file.
    pub undelivered: Vec<Alert>,
}

/// Summary of a replayed log.
#[derive(Debug, Clone, Serialize)]
pub struct ReplaySummary {
    pub events: usize,
    pub last_seq: u64,
    pub discarded_records: usize,
    pub torn_tail: bool,
    pub patients: Vec<PatientSummary>,
    pub sessions: usize,
    pub messages: usize,
    pub alerts: usize,
    pub policy_cells: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PatientSummary {
    pub patient_id: String,
    pub triples: usize,
}

pub fn summarize(engine: &Engine, contents: &LogContents) -> ReplaySummary {
    let patients = engine
        .patients()
        .into_iter()
        .map(|p| PatientSummary { triples: engine.patient_graph(&p).map_or(0, |g| g.len()), patient_id: p.to_string() })
        .collect();
    let sessions = engine.session_ids();
    let messages = sessions.iter().filter_map(|s| engine.session(s)).map(|s| s.turn_log.len()).sum();
    ReplaySummary {
        events: contents.records.len(),
        last_seq: contents.last_seq(),
        discarded_records: contents.discarded_records,
        torn_tail: contents.torn_tail,
        patients,
        sessions: sessions.len(),
        messages,
        alerts: engine.alerts_since(0).len(),
        policy_cells: engine.policy().cells().count(),
    }
}

fn write_atomic(path: &Path, body: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body)?;
    fs::rename(tmp, path)
}

impl App {
    pub fn start(config: ServiceConfig) -> Result<Self, StartError> {
        let resources = Arc::new(config.load_resources()?);
        let clock = Arc::new(match config.deterministic_clock {
            Some(start) => Clock::stepping(start),
            None => Clock::system(),
        });
        let (log, contents) = EventLog::open(&config.data_dir, clock.clone())?;
        let events = contents.events()?;
        let engine = Engine::replay(resources, config.engine_config(), &events)?;
        let policy_path = Self::policy_path(&config.data_dir);
        if !events.iter().any(|e| matches!(e, EngineEvent::PolicyUpdated { .. })) && policy_path.exists() {
            let text = fs::read_to_string(&policy_path)
                .map_err(|e| StartError::Snapshot { path: policy_path.clone(), message: e.to_string() })?;
            let p = ResponsePolicy::from_json(&text)
                .map_err(|e| StartError::Snapshot { path: policy_path.clone(), message: e.to_string() })?;
            engine.restore_policy(&p);
        }
        let recorded = recorded_alert_ids(&config.data_dir);
        let undelivered = engine
            .alerts_since(0)
            .into_iter()
            .map(|r| r.alert)
            .filter(|a| !recorded.contains(&a.alert_id))
            .collect();
        let notifier = Notifier::new(&config.alerts, &config.data_dir);
        tracing::info!(events = contents.records.len(), "replayed event log");
        Ok(App { config, engine, log, notifier, clock, started: Instant::now(), undelivered })
    }

    pub fn policy_path(data_dir: &Path) -> PathBuf {
        data_dir.join("snapshots").join("policy.json")
    }

    pub fn graph_path(data_dir: &Path, patient: &EntityId) -> PathBuf {
        data_dir.join("snapshots").join("graphs").join(format!("{}.tsv", patient.local()))
    }

    pub fn snapshot_policy(&self) -> std::io::Result<()> {
        write_atomic(&Self::policy_path(&self.config.data_dir), &self.engine.policy().to_json())
    }

    pub fn snapshot_graph(&self, patient: &EntityId) -> std::io::Result<()> {
        match self.engine.patient_graph(patient) {
            Some(g) => write_atomic(&Self::graph_path(&self.config.data_dir, patient), &g.to_tsv()),
            None => Ok(()),
        }
    }
}
