//! CLI configuration and stack construction.
//!
//! Settings come from a TOML file (`--config`), environment variables
//! (`MMAG_KEYRING`, `MMAG_FAKE_NOW`, `MMAG_BACKEND_URL`), and documented
//! defaults when the file is missing. Unknown keys are rejected so typos
//! fail loudly instead of silently using defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use mmag_core::backend::{GenerationBackend, MockBackend, RemoteBackend, BACKEND_URL_ENV};
use mmag_core::clock::{Clock, FakeClock, SystemClock};
use mmag_core::context::{ContextKind, ContextRegistry, HttpProvider, StaticProvider};
use mmag_core::controller::{ControllerConfig, MemoryController, Policy, PolicyName};
use mmag_core::conv::ConversationStore;
use mmag_core::episodic::EpisodicStore;
use mmag_core::longterm::LongTermStore;
use mmag_core::model::{MemorySource, TokenBudget};
use mmag_core::persist::audit::AuditLog;
use mmag_core::persist::backend::FileBackend;
use mmag_core::persist::keyring::{Keyring, KEYRING_ENV};
use mmag_core::persist::RecordStore;
use mmag_core::working::WorkingMemory;

pub const FAKE_NOW_ENV: &str = "MMAG_FAKE_NOW";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    /// Directory holding the record store, keyring, and audit log.
    #[serde(default = "default_store_dir")]
    pub store_dir: PathBuf,
    /// Keyring path; `MMAG_KEYRING` overrides.
    #[serde(default)]
    pub keyring_path: Option<PathBuf>,
    /// "mock", "silent", or "remote".
    #[serde(default = "default_backend")]
    pub backend: String,
    /// Remote endpoint; `MMAG_BACKEND_URL` overrides.
    #[serde(default)]
    pub backend_url: Option<String>,
    #[serde(default = "default_policy")]
    pub policy: String,
    #[serde(default = "default_budget_total")]
    pub budget_total: usize,
    /// Optional per-layer budget fractions, keyed by memory source name.
    #[serde(default)]
    pub fractions: BTreeMap<String, f64>,
    /// Fixed clock for replays; `MMAG_FAKE_NOW` overrides.
    #[serde(default)]
    pub fake_now_ms: Option<i64>,
    /// Static context stubs: kind -> fixed value.
    #[serde(default)]
    pub providers: BTreeMap<String, String>,
    /// HTTP context adapters: kind -> GET endpoint returning plain text.
    #[serde(default)]
    pub provider_urls: BTreeMap<String, String>,
}

fn default_store_dir() -> PathBuf {
    PathBuf::from(".mmag")
}

fn default_backend() -> String {
    "mock".to_string()
}

fn default_policy() -> String {
    "recency_first".to_string()
}

fn default_budget_total() -> usize {
    mmag_core::model::DEFAULT_TOKEN_BUDGET
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            store_dir: default_store_dir(),
            keyring_path: None,
            backend: default_backend(),
            backend_url: None,
            policy: default_policy(),
            budget_total: default_budget_total(),
            fractions: BTreeMap::new(),
            fake_now_ms: None,
            providers: BTreeMap::new(),
            provider_urls: BTreeMap::new(),
        }
    }
}

impl CliConfig {
    /// Loads the file when given, otherwise the documented defaults.
    pub fn load(path: Option<&Path>) -> Result<CliConfig> {
        match path {
            None => Ok(CliConfig::default()),
            Some(path) => {
                let raw = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let config: CliConfig = toml::from_str(&raw)
                    .with_context(|| format!("parsing config {}", path.display()))?;
                Ok(config)
            }
        }
    }

    pub fn policy(&self) -> Result<Policy> {
        let name = PolicyName::parse(&self.policy)
            .with_context(|| format!("unknown policy {:?}", self.policy))?;
        Ok(Policy::preset(name))
    }

    pub fn budget(&self) -> Result<TokenBudget> {
        let mut budget = TokenBudget::with_total(self.budget_total);
        for (name, fraction) in &self.fractions {
            let source = parse_source(name)
                .with_context(|| format!("unknown memory source {name:?} in [fractions]"))?;
            budget.per_layer_fractions.insert(source, *fraction);
        }
        budget.validate().map_err(anyhow::Error::from)?;
        Ok(budget)
    }

    pub fn keyring_path(&self) -> PathBuf {
        if let Ok(env_path) = std::env::var(KEYRING_ENV) {
            return PathBuf::from(env_path);
        }
        self.keyring_path
            .clone()
            .unwrap_or_else(|| self.store_dir.join("keyring.json"))
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        if let Some(ms) = std::env::var(FAKE_NOW_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<i64>().ok())
        {
            return Arc::new(FakeClock::at(ms));
        }
        match self.fake_now_ms {
            Some(ms) => Arc::new(FakeClock::at(ms)),
            None => Arc::new(SystemClock),
        }
    }

    pub fn generation_backend(&self) -> Result<Box<dyn GenerationBackend>> {
        match self.backend.as_str() {
            "mock" => Ok(Box::new(MockBackend)),
            "silent" => Ok(Box::new(mmag_core::backend::SilentBackend)),
            "remote" => {
                let url = std::env::var(BACKEND_URL_ENV)
                    .ok()
                    .or_else(|| self.backend_url.clone())
                    .with_context(|| {
                        format!("remote backend needs backend_url or {BACKEND_URL_ENV}")
                    })?;
                Ok(Box::new(RemoteBackend::new(url)))
            }
            other => bail!("unknown backend {other:?} (expected mock, silent, or remote)"),
        }
    }

    /// Opens the durable stores and wires the full controller stack.
    pub fn build_controller(&self) -> Result<MemoryController> {
        let clock = self.clock();
        std::fs::create_dir_all(&self.store_dir)
            .with_context(|| format!("creating store dir {}", self.store_dir.display()))?;
        let keyring = Keyring::load_or_generate(&self.keyring_path())?;
        let records = Arc::new(RecordStore::new(
            Arc::new(FileBackend::open(self.store_dir.join("store.mmag"))?),
            keyring,
            AuditLog::open(self.store_dir.join("audit.log"))?,
            clock.clone(),
        ));

        let registry = ContextRegistry::new();
        for (kind, value) in &self.providers {
            registry.register_provider(
                parse_kind(kind),
                Arc::new(StaticProvider(value.clone())),
            );
        }
        for (kind, url) in &self.provider_urls {
            registry.register_provider(parse_kind(kind), Arc::new(HttpProvider { url: url.clone() }));
        }

        Ok(MemoryController::new(
            Arc::new(ConversationStore::new(records.clone())),
            Arc::new(LongTermStore::new(records.clone(), clock.clone())),
            Arc::new(EpisodicStore::new(records, clock.clone())),
            Arc::new(registry),
            Arc::new(WorkingMemory::default()),
            clock,
            ControllerConfig {
                budget: self.budget()?,
                ..ControllerConfig::default()
            },
        ))
    }
}

fn parse_source(name: &str) -> Option<MemorySource> {
    MemorySource::ALL.iter().copied().find(|s| s.as_str() == name)
}

fn parse_kind(name: &str) -> ContextKind {
    match name {
        "location" => ContextKind::Location,
        "weather" => ContextKind::Weather,
        "time_of_day" => ContextKind::TimeOfDay,
        other => ContextKind::Custom(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_file_means_defaults() {
        let config = CliConfig::load(None).unwrap();
        assert_eq!(config.budget_total, 90_000);
        assert_eq!(config.backend, "mock");
        assert_eq!(config.policy, "recency_first");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mmag.toml");
        std::fs::write(&path, "budget_total = 500\nbananas = true\n").unwrap();
        let err = CliConfig::load(Some(&path)).unwrap_err();
        assert!(format!("{err:#}").contains("bananas"));
    }

    #[test]
    fn fractions_override_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mmag.toml");
        std::fs::write(
            &path,
            "budget_total = 1000\n[fractions]\nconversational = 0.5\nlong_term_user = 0.3\n",
        )
        .unwrap();
        let config = CliConfig::load(Some(&path)).unwrap();
        let budget = config.budget().unwrap();
        assert_eq!(budget.fraction(MemorySource::Conversational), 0.5);

        std::fs::write(&path, "[fractions]\nconversational = 1.5\n").unwrap();
        assert!(CliConfig::load(Some(&path)).unwrap().budget().is_err());
    }
}
