//! Alert delivery: POST to the configured URL with retries, recording each
//! outcome in `webhook_deliveries.jsonl` or `dead_letter.jsonl`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use alleviate_core::screeners::Alert;
use serde::{Deserialize, Serialize};

use crate::config::AlertConfig;

pub const DELIVERY_LOG: &str = "webhook_deliveries.jsonl";
pub const DEAD_LETTER: &str = "dead_letter.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub alert_id: String,
    pub url: String,
    pub attempts: u32,
    pub status: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub alert: Alert,
    pub attempts: u32,
    pub last_error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Delivered(DeliveryRecord),
    DeadLettered(DeadLetter),
}

pub struct Notifier {
    url: Option<String>,
    retries: u32,
    backoff: Duration,
    client: reqwest::Client,
    dir: PathBuf,
    files: Mutex<()>,
}

impl Notifier {
    pub fn new(cfg: &AlertConfig, dir: &Path) -> Self {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .expect("http client");
        Notifier {
            url: cfg.webhook_url.clone(),
            retries: cfg.retries,
            backoff: Duration::from_millis(cfg.backoff_ms),
            client,
            dir: dir.to_path_buf(),
            files: Mutex::new(()),
        }
    }

    fn append(&self, file: &str, line: &impl Serialize) {
        let _guard = self.files.lock().unwrap();
        let path = self.dir.join(file);
        let res = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| writeln!(f, "{}", serde_json::to_string(line).expect("encodes")));
        if let Err(e) = res {
            tracing::error!("cannot write {}: {e}", path.display());
        }
    }

    async fn attempt(&self, url: &str, body: &str) -> Result<u16, String> {
        let resp = self
            .client
            .post(url)
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .await
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if status.is_success() {
            Ok(status.as_u16())
        } else {
            Err(format!("HTTP {status}"))
        }
    }

    /// One initial attempt plus `retries` retries with doubling delay.
    pub async fn deliver(&self, alert: &Alert) -> Outcome {
        let Some(url) = &self.url else {
            let dl = DeadLetter { alert: alert.clone(), attempts: 0, last_error: "no webhook_url configured".into() };
            self.append(DEAD_LETTER, &dl);
            return Outcome::DeadLettered(dl);
        };
        let body = serde_json::to_string(alert).expect("alert encodes");
        let mut delay = self.backoff;
        let mut last_error = String::new();
        for attempt in 1..=self.retries + 1 {
            match self.attempt(url, &body).await {
                Ok(status) => {
                    let rec = DeliveryRecord { alert_id: alert.alert_id.clone(), url: url.clone(), attempts: attempt, status };
                    self.append(DELIVERY_LOG, &rec);
                    return Outcome::Delivered(rec);
                }
                Err(e) => {
                    tracing::warn!("webhook attempt {attempt} for {} failed: {e}", alert.alert_id);
                    last_error = e;
                }
            }
            if attempt <= self.retries {
                tokio::time::sleep(delay).await;
                delay *= 2;
            }
        }
        let dl = DeadLetter { alert: alert.clone(), attempts: self.retries + 1, last_error };
        self.append(DEAD_LETTER, &dl);
        Outcome::DeadLettered(dl)
    }
}

/// Alert ids recorded in either outcome file under `dir`.
pub fn recorded_alert_ids(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    if let Ok(text) = std::fs::read_to_string(dir.join(DELIVERY_LOG)) {
        out.extend(text.lines().filter_map(|l| serde_json::from_str::<DeliveryRecord>(l).ok()).map(|r| r.alert_id));
    }
    if let Ok(text) = std::fs::read_to_string(dir.join(DEAD_LETTER)) {
        out.extend(text.lines().filter_map(|l| serde_json::from_str::<DeadLetter>(l).ok()).map(|r| r.alert.alert_id));
    }
    out
}
