//! Append-only JSON-lines event log. Each engine batch is written as
//! consecutive records; the last record of a batch carries `commit: true`.
//! Readers ignore a trailing batch without its commit record.

use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use alleviate_core::engine::{EngineEvent, EventSink};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clock::Clock;

pub const LOG_FILE: &str = "events.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub kind: String,
    pub payload: Value,
    pub at: DateTime<Utc>,
    pub batch: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub commit: bool,
}

impl EventRecord {
    pub fn event(&self) -> Result<EngineEvent, serde_json::Error> {
        let mut v = self.payload.clone();
        if let Value::Object(m) = &mut v {
            m.insert("kind".into(), Value::String(self.kind.clone()));
        }
        serde_json::from_value(v)
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("corrupt log at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Committed records of a log plus what was dropped from its tail.
#[derive(Debug, Default)]
pub struct LogContents {
    pub records: Vec<EventRecord>,
    /// Byte length of the committed prefix.
    pub committed_len: u64,
    pub discarded_records: usize,
    pub torn_tail: bool,
}

impl LogContents {
    pub fn events(&self) -> Result<Vec<EngineEvent>, LogError> {
        self.records
            .iter()
            .map(|r| r.event().map_err(|e| LogError::CorruptLog { seq: r.seq, reason: e.to_string() }))
            .collect()
    }

    pub fn last_seq(&self) -> u64 {
        self.records.last().map_or(0, |r| r.seq)
    }

    pub fn last_batch(&self) -> u64 {
        self.records.last().map_or(0, |r| r.batch)
    }
}

/// Parses `text`, enforcing gap-free sequence numbers. An unparsable final
/// line without a newline is a torn write and is dropped with its batch.
pub fn parse_log(text: &str) -> Result<LogContents, LogError> {
    let mut out = LogContents::default();
    let mut pending: Vec<EventRecord> = Vec::new();
    let mut offset = 0u64;
    let mut expected = 1u64;
    let mut lines = text.split_inclusive('\n').peekable();
    while let Some(line) = lines.next() {
        let is_last = lines.peek().is_none();
        offset += line.len() as u64;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventRecord = match serde_json::from_str(line.trim_end()) {
            Ok(r) => r,
            Err(_) if is_last && !line.ends_with('\n') => {
                out.torn_tail = true;
                break;
            }
            Err(e) => return Err(LogError::CorruptLog { seq: expected, reason: e.to_string() }),
        };
        if rec.seq != expected {
            return Err(LogError::CorruptLog { seq: rec.seq, reason: format!("expected seq {expected}") });
        }
        if let Some(first) = pending.first() {
            if first.batch != rec.batch {
                return Err(LogError::CorruptLog { seq: rec.seq, reason: format!("batch {} never committed", first.batch) });
            }
        }
        expected += 1;
        let commit = rec.commit;
        pending.push(rec);
        if commit {
            out.records.append(&mut pending);
            out.committed_len = offset;
        }
    }
    out.discarded_records = pending.len();
    Ok(out)
}

pub fn read_log(dir: &Path) -> Result<LogContents, LogError> {
    let path = dir.join(LOG_FILE);
    match fs::read_to_string(&path) {
        Ok(text) => parse_log(&text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(LogContents::default()),
        Err(e) => Err(LogError::Io { path, source: e }),
    }
}

struct Writer {
    file: File,
    next_seq: u64,
    next_batch: u64,
}

/// Single-writer log handle; also the engine's event sink.
pub struct EventLog {
    path: PathBuf,
    clock: Arc<Clock>,
    inner: Mutex<Writer>,
}

impl EventLog {
    /// Opens (or creates) the log in `dir`, cutting off any uncommitted tail
    /// so that new batches follow the last committed one.
    pub fn open(dir: &Path, clock: Arc<Clock>) -> Result<(Self, LogContents), LogError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| LogError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let contents = read_log(dir)?;
        let path = dir.join(LOG_FILE);
        let mut file = OpenOptions::new().create(true).read(true).write(true).truncate(false).open(&path).map_err(io(&path))?;
        file.set_len(contents.committed_len).map_err(io(&path))?;
        file.seek(SeekFrom::End(0)).map_err(io(&path))?;
        let writer = Writer { file, next_seq: contents.last_seq() + 1, next_batch: contents.last_batch() + 1 };
        Ok((EventLog { path, clock, inner: Mutex::new(writer) }, contents))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EventSink for EventLog {
    fn record(&self, batch: &[EngineEvent]) -> Result<(), String> {
        if batch.is_empty() {
            return Ok(());
        }
        let mut w = self.inner.lock().unwrap();
        let at = self.clock.now();
        let mut buf = String::new();
        for (i, ev) in batch.iter().enumerate() {
            let mut payload = serde_json::to_value(ev).map_err(|e| e.to_string())?;
            if let Value::Object(m) = &mut payload {
                m.remove("kind");
            }
            let rec = EventRecord {
                seq: w.next_seq + i as u64,
                kind: ev.kind().to_string(),
                payload,
                at,
                batch: w.next_batch,
                commit: i + 1 == batch.len(),
            };
            buf.push_str(&serde_json::to_string(&rec).map_err(|e| e.to_string())?);
            buf.push('\n');
        }
        w.file.write_all(buf.as_bytes()).map_err(|e| format!("{}: {e}", self.path.display()))?;
        w.file.sync_data().map_err(|e| format!("{}: {e}", self.path.display()))?;
        w.next_seq += batch.len() as u64;
        w.next_batch += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alleviate_core::kg::EntityId;

    fn opened(at_min: u32) -> EngineEvent {
        EngineEvent::SessionOpened {
            session_id: format!("s{at_min:06}"),
            patient_id: EntityId::patient("p1").unwrap(),
            at: DateTime::parse_from_rfc3339("2024-01-01T00:00:00Z").unwrap().with_timezone(&Utc),
        }
    }

    #[test]
    fn write_then_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let (log, c) = EventLog::open(dir.path(), Arc::new(Clock::system())).unwrap();
        assert!(c.records.is_empty());
        log.record(&[opened(1), opened(2)]).unwrap();
        log.record(&[opened(3)]).unwrap();
        let c = read_log(dir.path()).unwrap();
        assert_eq!(c.records.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(c.events().unwrap()[2], opened(3));
    }

    #[test]
    fn uncommitted_and_torn_tails_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let (log, _) = EventLog::open(dir.path(), Arc::new(Clock::system())).unwrap();
        log.record(&[opened(1)]).unwrap();
        log.record(&[opened(2), opened(3)]).unwrap();
        let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // second batch lost its commit record, then a torn write
        let damaged = format!("{}\n{}\n{{\"seq\":3,\"ki", lines[0], lines[1]);
        let c = parse_log(&damaged).unwrap();
        assert_eq!(c.records.len(), 1);
        assert_eq!(c.discarded_records, 1);
        assert!(c.torn_tail);
        fs::write(dir.path().join(LOG_FILE), &damaged).unwrap();
        let (log, c) = EventLog::open(dir.path(), Arc::new(Clock::system())).unwrap();
        assert_eq!(c.records.len(), 1);
        log.record(&[opened(4)]).unwrap();
        let c = read_log(dir.path()).unwrap();
        assert_eq!(c.records.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn seq_gap_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let (log, _) = EventLog::open(dir.path(), Arc::new(Clock::system())).unwrap();
        log.record(&[opened(1)]).unwrap();
        log.record(&[opened(2)]).unwrap();
        log.record(&[opened(3)]).unwrap();
        let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let gapped = format!("{}\n{}\n", lines[0], lines[2]);
        match parse_log(&gapped) {
            Err(LogError::CorruptLog { seq, .. }) => assert_eq!(seq, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_log_is_empty_state() {
        let c = parse_log("").unwrap();
        assert!(c.records.is_empty());
        assert_eq!(c.last_seq(), 0);
    }
}
