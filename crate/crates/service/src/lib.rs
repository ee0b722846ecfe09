//! HTTP service, persistence and configuration around the dialogue engine.

pub mod api;
pub mod app;
pub mod clock;
pub mod config;
pub mod eventlog;
pub mod webhook;

pub use app::{App, ReplaySummary};
pub use config::ServiceConfig;
