//! Injected time source.
//!
//! Everything that needs "now" takes a [`Clock`] so replays and tests run on
//! a fake clock (`MMAG_FAKE_NOW`) while production uses the system clock.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

pub const MS_PER_HOUR: i64 = 3_600_000;
pub const MS_PER_DAY: i64 = 86_400_000;

/// Source of the current UTC time in milliseconds.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> i64;
}

/// Wall-clock time.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .expect("system clock before 1970")
            .as_millis() as i64
    }
}

/// Settable clock for replay and tests. Shared: clones observe the same time.
#[derive(Debug, Clone, Default)]
pub struct FakeClock {
    now: Arc<AtomicI64>,
}

impl FakeClock {
    pub fn at(now_ms: i64) -> Self {
        FakeClock {
            now: Arc::new(AtomicI64::new(now_ms)),
        }
    }

    pub fn set(&self, now_ms: i64) {
        self.now.store(now_ms, Ordering::SeqCst);
    }

    pub fn advance(&self, delta_ms: i64) {
        self.now.fetch_add(delta_ms, Ordering::SeqCst);
    }
}

impl Clock for FakeClock {
    fn now_ms(&self) -> i64 {
        self.now.load(Ordering::SeqCst)
    }
}

/// Clock selected from the environment: a fixed [`FakeClock`] when
/// `MMAG_FAKE_NOW` is set to a millisecond timestamp, the system clock
/// otherwise.
pub fn clock_from_env() -> Arc<dyn Clock> {
    match std::env::var("MMAG_FAKE_NOW")
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok())
    {
        Some(ms) => Arc::new(FakeClock::at(ms)),
        None => Arc::new(SystemClock),
    }
}

/// Day-of-week for a UTC millisecond timestamp, 0 = Sunday .. 6 = Saturday.
pub fn day_of_week(ts_ms: i64) -> u8 {
    // 1970-01-01 was a Thursday.
    let days = ts_ms.div_euclid(MS_PER_DAY);
    ((days + 4).rem_euclid(7)) as u8
}

/// Hour of day (0..24) for a UTC millisecond timestamp.
pub fn hour_of_day(ts_ms: i64) -> u8 {
    (ts_ms.rem_euclid(MS_PER_DAY) / MS_PER_HOUR) as u8
}
