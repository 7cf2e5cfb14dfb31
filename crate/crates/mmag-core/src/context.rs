//! Context-aware memory: registry of environmental signal providers.
//!
//! Providers (weather, location, anything custom) are queried in parallel
//! with a per-provider timeout. A provider that fails or stalls is simply
//! omitted from the snapshot; a missing signal is safer than a stale or
//! blocking one. `time_of_day` is built in and comes from the injected
//! clock. Signals carry a TTL and stale ones never reach a prompt.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::clock::hour_of_day;
use crate::error::Result;

pub const DEFAULT_PROVIDER_TIMEOUT: Duration = Duration::from_millis(200);
pub const WEATHER_TTL_MS: i64 = 30 * 60_000;
pub const LOCATION_TTL_MS: i64 = 10 * 60_000;
pub const TIME_OF_DAY_TTL_MS: i64 = 60_000;
pub const CUSTOM_TTL_MS: i64 = 5 * 60_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    Location,
    Weather,
    TimeOfDay,
    Custom(String),
}

impl ContextKind {
    pub fn name(&self) -> &str {
        match self {
            ContextKind::Location => "location",
            ContextKind::Weather => "weather",
            ContextKind::TimeOfDay => "time_of_day",
            ContextKind::Custom(tag) => tag,
        }
    }

    pub fn default_ttl_ms(&self) -> i64 {
        match self {
            ContextKind::Location => LOCATION_TTL_MS,
            ContextKind::Weather => WEATHER_TTL_MS,
            ContextKind::TimeOfDay => TIME_OF_DAY_TTL_MS,
            ContextKind::Custom(_) => CUSTOM_TTL_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSignal {
    pub kind: ContextKind,
    pub value: String,
    pub observed_ms: i64,
    pub ttl_ms: i64,
}

impl ContextSignal {
    pub fn is_fresh(&self, now_ms: i64) -> bool {
        now_ms - self.observed_ms <= self.ttl_ms
    }
}

/// One environment signal source. Implementations may block; the registry
/// enforces the timeout around them.
pub trait ContextProvider: Send + Sync {
    fn fetch(&self, user_id: &str) -> Result<String>;
}

/// Fixed-value provider, the stub used in tests and config-driven demos.
#[derive(Debug, Clone)]
pub struct StaticProvider(pub String);

impl ContextProvider for StaticProvider {
    fn fetch(&self, _user_id: &str) -> Result<String> {
        Ok(self.0.clone())
    }
}

/// Generic HTTP adapter: GET an endpoint that returns plain text, take the
/// body as the signal value. `{user}` in the URL is replaced by the user id.
pub struct HttpProvider {
    pub url: String,
}

impl ContextProvider for HttpProvider {
    fn fetch(&self, user_id: &str) -> Result<String> {
        let url = self.url.replace("{user}", user_id);
        let body = ureq::get(&url)
            .call()
            .map_err(|e| crate::error::MemoryError::backend(format!("context GET {url}: {e}")))?
            .into_string()
            .map_err(|e| crate::error::MemoryError::backend(format!("context body: {e}")))?;
        Ok(body.trim().to_string())
    }
}

/// Bucketed local time: morning 05-11, afternoon 12-17, evening 18-22,
/// night 23-04.
pub fn time_of_day_bucket(ts_ms: i64) -> &'static str {
    match hour_of_day(ts_ms) {
        5..=11 => "morning",
        12..=17 => "afternoon",
        18..=22 => "evening",
        _ => "night",
    }
}

/// Provider registry: at most one provider per kind, queried concurrently
/// at snapshot time.
pub struct ContextRegistry {
    providers: RwLock<BTreeMap<ContextKind, Arc<dyn ContextProvider>>>,
    timeout: Duration,
}

impl Default for ContextRegistry {
    fn default() -> Self {
        ContextRegistry::new()
    }
}

impl ContextRegistry {
    pub fn new() -> ContextRegistry {
        ContextRegistry {
            providers: RwLock::new(BTreeMap::new()),
            timeout: DEFAULT_PROVIDER_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> ContextRegistry {
        self.timeout = timeout;
        self
    }

    /// Registers a provider for a kind. Re-registering replaces the old
    /// provider with a warning.
    pub fn register_provider(&self, kind: ContextKind, provider: Arc<dyn ContextProvider>) {
        let mut providers = self.providers.write().unwrap();
        if providers.insert(kind.clone(), provider).is_some() {
            log::warn!("context provider for {:?} replaced", kind.name());
        }
    }

    pub fn provider_kinds(&self) -> Vec<ContextKind> {
        self.providers.read().unwrap().keys().cloned().collect()
    }

    /// Queries every provider concurrently and returns whatever answered in
    /// time, plus the built-in time_of_day signal. Never fails: provider
    /// errors and timeouts degrade to omission. Total wait is bounded by
    /// the per-provider timeout, not the provider count.
    pub fn snapshot(&self, user_id: &str, now_ms: i64) -> Vec<ContextSignal> {
        let providers: Vec<(ContextKind, Arc<dyn ContextProvider>)> = {
            let guard = self.providers.read().unwrap();
            guard.iter().map(|(k, p)| (k.clone(), p.clone())).collect()
        };

        let (tx, rx) = mpsc::channel::<(ContextKind, Result<String>)>();
        let expected = providers.len();
        for (kind, provider) in providers {
            let tx = tx.clone();
            let user = user_id.to_string();
            std::thread::spawn(move || {
                let result = provider.fetch(&user);
                // Receiver may have given up already; ignore send errors.
                let _ = tx.send((kind, result));
            });
        }
        drop(tx);

        let mut signals = vec![ContextSignal {
            kind: ContextKind::TimeOfDay,
            value: time_of_day_bucket(now_ms).to_string(),
            observed_ms: now_ms,
            ttl_ms: TIME_OF_DAY_TTL_MS,
        }];
        let deadline = Instant::now() + self.timeout;
        for _ in 0..expected {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(remaining) {
                Ok((kind, Ok(value))) if !value.trim().is_empty() => {
                    let ttl_ms = kind.default_ttl_ms();
                    signals.push(ContextSignal {
                        kind,
                        value: value.trim().to_string(),
                        observed_ms: now_ms,
                        ttl_ms,
                    });
                }
                Ok((kind, Ok(_))) => {
                    log::debug!("context provider {:?} returned empty value", kind.name());
                }
                Ok((kind, Err(e))) => {
                    log::debug!("context provider {:?} failed: {e}", kind.name());
                }
                Err(_) => break, // deadline hit; stragglers are omitted
            }
        }
        signals.sort_by(|a, b| a.kind.name().cmp(b.kind.name()).then(a.kind.cmp(&b.kind)));
        signals
    }
}

/// Deterministic one-line rendering of fresh signals, sorted by kind name.
/// Empty input renders to the empty string.
pub fn render_context(signals: &[ContextSignal]) -> String {
    if signals.is_empty() {
        return String::new();
    }
    let mut sorted: Vec<&ContextSignal> = signals.iter().collect();
    sorted.sort_by(|a, b| a.kind.name().cmp(b.kind.name()));
    let body = sorted
        .iter()
        .map(|s| format!("{}={}", s.kind.name(), s.value))
        .collect::<Vec<_>>()
        .join("; ");
    format!("Context: {body}")
}

/// Drops signals whose TTL has lapsed at `now_ms`.
pub fn fresh_only(signals: Vec<ContextSignal>, now_ms: i64) -> Vec<ContextSignal> {
    signals.into_iter().filter(|s| s.is_fresh(now_ms)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::MS_PER_HOUR;
    use crate::error::MemoryError;

    struct FailingProvider;
    impl ContextProvider for FailingProvider {
        fn fetch(&self, _u: &str) -> Result<String> {
            Err(MemoryError::backend("sensor offline"))
        }
    }

    struct SleepyProvider(Duration);
    impl ContextProvider for SleepyProvider {
        fn fetch(&self, _u: &str) -> Result<String> {
            std::thread::sleep(self.0);
            Ok("too late".into())
        }
    }

    #[test]
    fn time_of_day_buckets() {
        assert_eq!(time_of_day_bucket(8 * MS_PER_HOUR), "morning");
        assert_eq!(time_of_day_bucket(12 * MS_PER_HOUR), "afternoon");
        assert_eq!(time_of_day_bucket(18 * MS_PER_HOUR), "evening");
        assert_eq!(time_of_day_bucket(23 * MS_PER_HOUR), "night");
        assert_eq!(time_of_day_bucket(3 * MS_PER_HOUR), "night");
        assert_eq!(time_of_day_bucket(5 * MS_PER_HOUR), "morning");
    }

    #[test]
    fn snapshot_without_providers_has_builtin_time_of_day() {
        let registry = ContextRegistry::new();
        let signals = registry.snapshot("u1", 8 * MS_PER_HOUR);
        assert_eq!(signals.len(), 1);
        assert_eq!(signals[0].kind, ContextKind::TimeOfDay);
        assert_eq!(signals[0].value, "morning");
    }

    #[test]
    fn registered_stub_appears_in_snapshot() {
        let registry = ContextRegistry::new();
        registry.register_provider(
            ContextKind::Weather,
            Arc::new(StaticProvider("rain".into())),
        );
        let signals = registry.snapshot("u1", 0);
        assert!(signals
            .iter()
            .any(|s| s.kind == ContextKind::Weather && s.value == "rain"));
    }

    #[test]
    fn reregistration_replaces_provider() {
        let registry = ContextRegistry::new();
        registry.register_provider(ContextKind::Weather, Arc::new(StaticProvider("rain".into())));
        registry.register_provider(ContextKind::Weather, Arc::new(StaticProvider("sun".into())));
        assert_eq!(registry.provider_kinds().len(), 1);
        let signals = registry.snapshot("u1", 0);
        let weather = signals.iter().find(|s| s.kind == ContextKind::Weather).unwrap();
        assert_eq!(weather.value, "sun");
    }

    #[test]
    fn failing_provider_is_omitted_not_fatal() {
        let registry = ContextRegistry::new();
        registry.register_provider(ContextKind::Location, Arc::new(FailingProvider));
        registry.register_provider(ContextKind::Weather, Arc::new(StaticProvider("fog".into())));
        let signals = registry.snapshot("u1", 0);
        assert!(signals.iter().all(|s| s.kind != ContextKind::Location));
        assert!(signals.iter().any(|s| s.kind == ContextKind::Weather));
    }

    #[test]
    fn slow_provider_times_out_and_snapshot_stays_fast() {
        let registry = ContextRegistry::new().with_timeout(Duration::from_millis(100));
        registry.register_provider(
            ContextKind::Weather,
            Arc::new(SleepyProvider(Duration::from_secs(1))),
        );
        registry.register_provider(
            ContextKind::Location,
            Arc::new(StaticProvider("florence".into())),
        );
        let started = Instant::now();
        let signals = registry.snapshot("u1", 0);
        assert!(started.elapsed() < Duration::from_millis(700));
        assert!(signals.iter().all(|s| s.kind != ContextKind::Weather));
        assert!(signals.iter().any(|s| s.value == "florence"));
    }

    #[test]
    fn render_is_deterministic_and_sorted() {
        assert_eq!(render_context(&[]), "");
        let signals = vec![
            ContextSignal {
                kind: ContextKind::Weather,
                value: "rain".into(),
                observed_ms: 0,
                ttl_ms: 1,
            },
            ContextSignal {
                kind: ContextKind::Location,
                value: "rome".into(),
                observed_ms: 0,
                ttl_ms: 1,
            },
        ];
        assert_eq!(render_context(&signals), "Context: location=rome; weather=rain");
        let one = vec![ContextSignal {
            kind: ContextKind::TimeOfDay,
            value: "morning".into(),
            observed_ms: 0,
            ttl_ms: 1,
        }];
        assert_eq!(render_context(&one), "Context: time_of_day=morning");
    }

    #[test]
    fn stale_signals_are_excluded() {
        let signals = vec![
            ContextSignal {
                kind: ContextKind::Weather,
                value: "old rain".into(),
                observed_ms: 0,
                ttl_ms: WEATHER_TTL_MS,
            },
            ContextSignal {
                kind: ContextKind::Location,
                value: "rome".into(),
                observed_ms: WEATHER_TTL_MS + 50_000,
                ttl_ms: LOCATION_TTL_MS,
            },
        ];
        let now = WEATHER_TTL_MS + 60_000;
        let fresh = fresh_only(signals, now);
        assert_eq!(fresh.len(), 1);
        assert_eq!(fresh[0].kind, ContextKind::Location);
    }
}
