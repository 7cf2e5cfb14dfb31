//! Prioritization policies.
//!
//! Three presets mirror the prioritization strategies the controller
//! arbitrates between: recency heuristics, user-centric weighting, and
//! task-driven rules. All weights are configuration, not code: a preset is
//! just a starting point.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clock::MS_PER_HOUR;
use crate::error::{MemoryError, Result};
use crate::model::MemorySource;

/// Recency decay time constant: one day.
pub const DEFAULT_TAU_MS: i64 = 24 * MS_PER_HOUR;

/// Source weight for layers a preset does not single out.
const BASELINE_SOURCE_WEIGHT: f64 = 0.25;

/// Policy identity. Enum order is the deterministic tie-break order for
/// conflict resolution.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    RecencyFirst,
    UserCentric,
    TaskDriven,
}

impl PolicyName {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyName::RecencyFirst => "recency_first",
            PolicyName::UserCentric => "user_centric",
            PolicyName::TaskDriven => "task_driven",
        }
    }

    pub fn parse(s: &str) -> Option<PolicyName> {
        match s {
            "recency_first" => Some(PolicyName::RecencyFirst),
            "user_centric" => Some(PolicyName::UserCentric),
            "task_driven" => Some(PolicyName::TaskDriven),
            _ => None,
        }
    }
}

/// Scoring weights: `w_recency + w_relevance + w_source = 1`, per-source
/// weights in [0, 1], recency decaying with time constant `tau_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub name: PolicyName,
    pub w_recency: f64,
    pub w_relevance: f64,
    pub w_source: f64,
    pub source_weights: BTreeMap<MemorySource, f64>,
    pub tau_ms: i64,
}

fn uniform_weights(favored: Option<(MemorySource, f64)>) -> BTreeMap<MemorySource, f64> {
    let mut weights: BTreeMap<MemorySource, f64> = MemorySource::ALL
        .iter()
        .map(|s| (*s, BASELINE_SOURCE_WEIGHT))
        .collect();
    if let Some((source, weight)) = favored {
        weights.insert(source, weight);
    }
    weights
}

impl Policy {
    /// Recency heuristics: the most recent signal wins.
    pub fn recency_first() -> Policy {
        Policy {
            name: PolicyName::RecencyFirst,
            w_recency: 0.7,
            w_relevance: 0.2,
            w_source: 0.1,
            source_weights: uniform_weights(None),
            tau_ms: DEFAULT_TAU_MS,
        }
    }

    /// User-centric weighting: long-term user traits take precedence.
    pub fn user_centric() -> Policy {
        Policy {
            name: PolicyName::UserCentric,
            w_recency: 0.2,
            w_relevance: 0.3,
            w_source: 0.5,
            source_weights: uniform_weights(Some((MemorySource::LongTermUser, 1.0))),
            tau_ms: DEFAULT_TAU_MS,
        }
    }

    /// Task-driven rules: working memory is elevated while a task runs.
    pub fn task_driven() -> Policy {
        Policy {
            name: PolicyName::TaskDriven,
            w_recency: 0.2,
            w_relevance: 0.3,
            w_source: 0.5,
            source_weights: uniform_weights(Some((MemorySource::Working, 1.0))),
            tau_ms: DEFAULT_TAU_MS,
        }
    }

    pub fn preset(name: PolicyName) -> Policy {
        match name {
            PolicyName::RecencyFirst => Policy::recency_first(),
            PolicyName::UserCentric => Policy::user_centric(),
            PolicyName::TaskDriven => Policy::task_driven(),
        }
    }

    pub fn source_weight(&self, source: MemorySource) -> f64 {
        self.source_weights.get(&source).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let sum = self.w_recency + self.w_relevance + self.w_source;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MemoryError::InvalidInput(format!(
                "policy weights must sum to 1.0, got {sum}"
            )));
        }
        if [self.w_recency, self.w_relevance, self.w_source]
            .iter()
            .any(|w| *w < 0.0)
        {
            return Err(MemoryError::InvalidInput("policy weights must be >= 0".into()));
        }
        for (source, w) in &self.source_weights {
            if !(0.0..=1.0).contains(w) {
                return Err(MemoryError::InvalidInput(format!(
                    "source weight for {source} out of [0,1]: {w}"
                )));
            }
        }
        if self.tau_ms <= 0 {
            return Err(MemoryError::InvalidInput("tau_ms must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_distinct() {
        for name in [
            PolicyName::RecencyFirst,
            PolicyName::UserCentric,
            PolicyName::TaskDriven,
        ] {
            let p = Policy::preset(name);
            p.validate().unwrap();
            assert_eq!(p.name, name);
        }
        assert!(
            Policy::user_centric().source_weight(MemorySource::LongTermUser)
                > Policy::user_centric().source_weight(MemorySource::Working)
        );
        assert!(
            Policy::task_driven().source_weight(MemorySource::Working)
                > Policy::task_driven().source_weight(MemorySource::LongTermUser)
        );
    }

    #[test]
    fn invalid_weights_rejected() {
        let mut p = Policy::recency_first();
        p.w_recency = 0.9;
        assert!(p.validate().is_err());

        let mut p = Policy::recency_first();
        p.source_weights.insert(MemorySource::Context, 1.5);
        assert!(p.validate().is_err());
    }

    #[test]
    fn enum_order_is_tiebreak_order() {
        assert!(PolicyName::RecencyFirst < PolicyName::UserCentric);
        assert!(PolicyName::UserCentric < PolicyName::TaskDriven);
        assert_eq!(PolicyName::parse("user_centric"), Some(PolicyName::UserCentric));
        assert_eq!(PolicyName::parse("nope"), None);
    }
}
