use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use alleviate_core::dialogue::DialogueConfig;
use alleviate_core::engine::EngineConfig;
use alleviate_core::resources::{ResourceSources, Resources};
use alleviate_core::screeners::Thresholds;
use chrono::{DateTime, Utc};
use serde::Deserialize;
use thiserror::Error;

pub const CONFIG_ENV: &str = "ALLEVIATE_CONFIG";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::File { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbPath {
    pub id: String,
    pub path: PathBuf,
}

/// Omitted entries fall back to the bundled fixtures.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub patterns: Option<PathBuf>,
    pub safety_rules: Option<PathBuf>,
    pub tree: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub guidelines: Option<PathBuf>,
    pub kbs: Option<Vec<KbPath>>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub link: f64,
    #[serde(rename = "match")]
    pub match_: f64,
    pub flag_at: u32,
    pub emergency_at: u32,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig { link: 0.75, match_: 0.70, flag_at: 1, emergency_at: 4 }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub clinician_weight: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig { epsilon: 0.1, alpha: 0.1, clinician_weight: 1.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlertConfig {
    pub webhook_url: Option<String>,
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for AlertConfig {
    fn default() -> Self {
        AlertConfig { webhook_url: None, retries: 3, backoff_ms: 200, timeout_ms: 2_000 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    listen: Option<String>,
    data_dir: PathBuf,
    #[serde(default)]
    seed: u64,
    bearer_token: Option<String>,
    /// Start of a clock that advances one second per reading.
    deterministic_clock: Option<DateTime<Utc>>,
    #[serde(default)]
    paths: PathsConfig,
    #[serde(default)]
    thresholds: ThresholdConfig,
    #[serde(default)]
    rl: RlConfig,
    #[serde(default)]
    alerts: AlertConfig,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub seed: u64,
    pub bearer_token: Option<String>,
    pub deterministic_clock: Option<DateTime<Utc>>,
    pub paths: PathsConfig,
    pub thresholds: ThresholdConfig,
    pub rl: RlConfig,
    pub alerts: AlertConfig,
}

impl ServiceConfig {
    /// Reads a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).map_err(|e| match e {
            ConfigError::Invalid(m) => file_err(path, m),
            other => other,
        })
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let listen = raw
            .listen
            .as_deref()
            .unwrap_or(DEFAULT_LISTEN)
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("listen: {e}")))?;
        let abs = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let paths = PathsConfig {
            patterns: raw.paths.patterns.as_ref().map(abs),
            safety_rules: raw.paths.safety_rules.as_ref().map(abs),
            tree: raw.paths.tree.as_ref().map(abs),
            templates: raw.paths.templates.as_ref().map(abs),
            lexicon: raw.paths.lexicon.as_ref().map(abs),
            guidelines: raw.paths.guidelines.as_ref().map(abs),
            kbs: raw
                .paths
                .kbs
                .as_ref()
                .map(|v| v.iter().map(|k| KbPath { id: k.id.clone(), path: abs(&k.path) }).collect()),
        };
        let cfg = ServiceConfig {
            listen,
            data_dir: abs(&raw.data_dir),
            seed: raw.seed,
            bearer_token: raw.bearer_token,
            deterministic_clock: raw.deterministic_clock,
            paths,
            thresholds: raw.thresholds,
            rl: raw.rl,
            alerts: raw.alerts,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.thresholds;
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("thresholds.{name} = {v} outside (0, 1]")))
            }
        };
        unit("link", t.link)?;
        unit("match", t.match_)?;
        if t.flag_at == 0 || t.emergency_at < t.flag_at {
            return Err(ConfigError::Invalid(format!(
                "thresholds need 1 <= flag_at <= emergency_at, got {} and {}",
                t.flag_at, t.emergency_at
            )));
        }
        if !(0.0..=1.0).contains(&self.rl.epsilon) {
            return Err(ConfigError::Invalid(format!("rl.epsilon = {} outside [0, 1]", self.rl.epsilon)));
        }
        if !(self.rl.alpha > 0.0 && self.rl.alpha <= 1.0) {
            return Err(ConfigError::Invalid(format!("rl.alpha = {} outside (0, 1]", self.rl.alpha)));
        }
        if !(self.rl.clinician_weight.is_finite() && self.rl.clinician_weight > 0.0) {
            return Err(ConfigError::Invalid(format!("rl.clinician_weight = {} must be positive", self.rl.clinician_weight)));
        }
        if let Some(url) = &self.alerts.webhook_url {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(ConfigError::Invalid(format!("alerts.webhook_url {url:?} is not an http(s) URL")));
            }
        }
        Ok(())
    }

    /// Reads every referenced file and parses it; errors name the file.
    pub fn load_resources(&self) -> Result<Resources, ConfigError> {
        let mut src = ResourceSources::bundled();
        let read = |slot: &mut (String, String), p: &Option<PathBuf>| -> Result<(), ConfigError> {
            if let Some(p) = p {
                *slot = (p.display().to_string(), fs::read_to_string(p).map_err(|e| file_err(p, e))?);
            }
            Ok(())
        };
        read(&mut src.patterns, &self.paths.patterns)?;
        read(&mut src.rules, &self.paths.safety_rules)?;
        read(&mut src.tree, &self.paths.tree)?;
        read(&mut src.templates, &self.paths.templates)?;
        read(&mut src.lexicon, &self.paths.lexicon)?;
        read(&mut src.guidelines, &self.paths.guidelines)?;
        if let Some(kbs) = &self.paths.kbs {
            src.kbs = kbs
                .iter()
                .map(|k| {
                    let text = fs::read_to_string(&k.path).map_err(|e| file_err(&k.path, e))?;
                    Ok((k.id.clone(), k.path.display().to_string(), text))
                })
                .collect::<Result<_, ConfigError>>()?;
        }
        Resources::load(&src).map_err(|e| ConfigError::File { path: PathBuf::from(e.source_name), message: e.message })
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            dialogue: DialogueConfig {
                link_threshold: self.thresholds.link,
                match_threshold: self.thresholds.match_,
                thresholds: Thresholds { flag_at: self.thresholds.flag_at, emergency_at: self.thresholds.emergency_at },
                seed: self.seed,
                ..DialogueConfig::default()
            },
            epsilon: self.rl.epsilon,
            alpha: self.rl.alpha,
            clinician_weight: self.rl.clinician_weight,
        }
    }
}

/// `--config` wins, then `ALLEVIATE_CONFIG`.
pub fn config_path(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
}
