//! Python bindings for the dialogue engine and its building blocks.

use std::sync::Arc;

use alleviate_core::engine::{Engine, EngineConfig, EngineError, NullSink};
use alleviate_core::ingest::{extract_triples as extract, ProviderNote};
use alleviate_core::kg::{EntityId, KnowledgeGraph};
use alleviate_core::link;
use alleviate_core::policy::{FeedbackSource, Signal};
use alleviate_core::resources::Resources;
use alleviate_core::safety::{check_action, parse_constraints, ActionType, Bindings};
use chrono::Utc;
use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn engine_err(e: EngineError) -> PyErr {
    match e {
        EngineError::UnknownPatient(_)
        | EngineError::UnknownSession(_)
        | EngineError::UnknownMessage(_)
        | EngineError::UnknownAlert(_) => PyKeyError::new_err(e.to_string()),
        EngineError::Conflict(_) | EngineError::Validation(_) => value_err(e),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_name<T: DeserializeOwned>(what: &str, raw: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(raw.to_string())).map_err(|_| value_err(format!("unknown {what} {raw:?}")))
}

fn patient_id(raw: &str) -> PyResult<EntityId> {
    if raw.contains(':') { raw.parse() } else { EntityId::patient(raw) }.map_err(value_err)
}

/// In-memory engine over the bundled knowledge bases, rules and templates.
#[pyclass(name = "Engine", frozen)]
struct PyEngine {
    inner: Engine,
}

#[pymethods]
impl PyEngine {
    #[new]
    #[pyo3(signature = (seed=0, epsilon=0.1, alpha=0.1))]
    fn new(seed: u64, epsilon: f64, alpha: f64) -> PyResult<Self> {
        let mut config = EngineConfig { epsilon, alpha, ..EngineConfig::default() };
        config.dialogue.seed = seed;
        let inner = Engine::new(Arc::new(Resources::bundled()), config).map_err(engine_err)?;
        Ok(PyEngine { inner })
    }

    fn ingest_note<'py>(&self, py: Python<'py>, patient: &str, note_id: &str, text: &str) -> PyResult<Bound<'py, PyAny>> {
        let note = ProviderNote { note_id: note_id.into(), patient_id: patient_id(patient)?, text: text.into(), authored_at: Utc::now() };
        let report = self.inner.ingest_note(&note, &NullSink).map_err(engine_err)?;
        to_py(py, &report)
    }

    fn open_session(&self, patient: &str) -> PyResult<String> {
        self.inner.open_session(&patient_id(patient)?, Utc::now(), &NullSink).map_err(engine_err)
    }

    fn send_message<'py>(&self, py: Python<'py>, session_id: &str, text: &str) -> PyResult<Bound<'py, PyAny>> {
        let out = self.inner.send_message(session_id, text, Utc::now(), &NullSink).map_err(engine_err)?;
        to_py(py, &out)
    }

    /// Returns the updated q-value, or None when the reply was not learnable.
    #[pyo3(signature = (session_id, message_id, signal, source="patient"))]
    fn feedback(&self, session_id: &str, message_id: &str, signal: &str, source: &str) -> PyResult<Option<f64>> {
        let signal: Signal = from_name("signal", signal)?;
        let source: FeedbackSource = from_name("source", source)?;
        let out = self.inner.feedback(session_id, message_id, source, signal, Utc::now(), &NullSink).map_err(engine_err)?;
        Ok(out.q_after)
    }

    fn graph_tsv(&self, patient: &str) -> PyResult<String> {
        let id = patient_id(patient)?;
        self.inner.patient_graph(&id).map(|g| g.to_tsv()).ok_or_else(|| PyKeyError::new_err(id.to_string()))
    }

    #[pyo3(signature = (since_seq=0))]
    fn alerts<'py>(&self, py: Python<'py>, since_seq: u64) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.alerts_since(since_seq))
    }

    fn explanations<'py>(&self, py: Python<'py>, session_id: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.explanations(session_id).map_err(engine_err)?)
    }

    fn policy_json(&self) -> String {
        self.inner.policy().to_json()
    }
}

/// Cosine similarity of the trigram embeddings of two strings.
#[pyfunction]
fn cosine(a: &str, b: &str) -> f64 {
    link::cosine(a, b)
}

/// Triples the bundled extraction patterns find in `text`.
#[pyfunction]
#[pyo3(signature = (patient, text, note_id="note"))]
fn extract_triples<'py>(py: Python<'py>, patient: &str, text: &str, note_id: &str) -> PyResult<Bound<'py, PyAny>> {
    let note = ProviderNote { note_id: note_id.into(), patient_id: patient_id(patient)?, text: text.into(), authored_at: Utc::now() };
    to_py(py, &extract(&note, &Resources::bundled().patterns))
}

/// Safety verdict for `action` under `rules` against a TSV graph.
#[pyfunction]
fn check_constraints<'py>(
    py: Python<'py>,
    rules: &str,
    graph_tsv: &str,
    action: &str,
    bindings: std::collections::BTreeMap<String, String>,
) -> PyResult<Bound<'py, PyAny>> {
    let rules = parse_constraints(rules).map_err(value_err)?;
    let graph = KnowledgeGraph::from_tsv("graph", graph_tsv).map_err(value_err)?;
    let action: ActionType = action.parse().map_err(value_err)?;
    let bindings = bindings
        .into_iter()
        .map(|(k, v)| v.parse::<EntityId>().map(|e| (k, e)))
        .collect::<Result<Bindings, _>>()
        .map_err(value_err)?;
    to_py(py, &check_action(action, &bindings, &graph, &rules).map_err(value_err)?)
}

#[pymodule]
fn alleviate(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(extract_triples, m)?)?;
    m.add_function(wrap_pyfunction!(check_constraints, m)?)?;
    Ok(())
}
