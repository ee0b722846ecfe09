use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, Duration, Utc};

/// Wall clock, or a fake one that ticks one second per reading.
#[derive(Debug)]
pub enum Clock {
    System,
    Stepping { start: DateTime<Utc>, ticks: AtomicI64 },
}

impl Clock {
    pub fn system() -> Self {
        Clock::System
    }

    pub fn stepping(start: DateTime<Utc>) -> Self {
        Clock::Stepping { start, ticks: AtomicI64::new(0) }
    }

    pub fn now(&self) -> DateTime<Utc> {
        match self {
            Clock::System => Utc::now(),
            Clock::Stepping { start, ticks } => *start + Duration::seconds(ticks.fetch_add(1, Ordering::SeqCst)),
        }
    }
}
