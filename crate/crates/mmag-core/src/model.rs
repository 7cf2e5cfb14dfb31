//! Shared domain types: messages, roles, memory sources, token budgets.
//!
//! The token counter here is the deterministic bytes/4 heuristic. It exists
//! behind the [`TokenCounter`] trait so a model-specific tokenizer can be
//! swapped in without touching budget enforcement.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MemoryError, Result};

/// Default whole-assembly token budget.
pub const DEFAULT_TOKEN_BUDGET: usize = 90_000;

/// Largest single message accepted by validation, in tokens.
pub const DEFAULT_MAX_MESSAGE_TOKENS: usize = 32_768;

// ---------------------------------------------------------------------------
// Token counting
// ---------------------------------------------------------------------------

/// Deterministic token estimate: `ceil(utf8_byte_length / 4)`.
///
/// Monotone in byte length, zero only for the empty string.
pub fn count_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// Pluggable token counter. [`HeuristicCounter`] is the default; a real
/// tokenizer can implement this to replace it.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// The bytes/4 heuristic as a [`TokenCounter`].
#[derive(Debug, Default, Clone, Copy)]
pub struct HeuristicCounter;

impl TokenCounter for HeuristicCounter {
    fn count(&self, text: &str) -> usize {
        count_tokens(text)
    }
}

/// Truncates `text` so that `count_tokens` of the result is at most
/// `max_tokens`, cutting on a char boundary.
pub fn truncate_to_tokens(text: &str, max_tokens: usize) -> &str {
    let max_bytes = max_tokens.saturating_mul(4);
    if text.len() <= max_bytes {
        return text;
    }
    let mut cut = max_bytes;
    while cut > 0 && !text.is_char_boundary(cut) {
        cut -= 1;
    }
    &text[..cut]
}

// ---------------------------------------------------------------------------
// Roles and sources
// ---------------------------------------------------------------------------

/// Dialogue role, mirroring chat-completion wire roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
    System,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::System => "system",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "user" => Some(Role::User),
            "assistant" => Some(Role::Assistant),
            "system" => Some(Role::System),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which memory layer a retrieved item came from. Every retrieved item
/// carries exactly one source tag.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum MemorySource {
    Conversational,
    LongTermUser,
    EpisodicEvent,
    Routine,
    Context,
    Working,
}

impl MemorySource {
    pub fn as_str(&self) -> &'static str {
        match self {
            MemorySource::Conversational => "conversational",
            MemorySource::LongTermUser => "long_term_user",
            MemorySource::EpisodicEvent => "episodic_event",
            MemorySource::Routine => "routine",
            MemorySource::Context => "context",
            MemorySource::Working => "working",
        }
    }

    pub const ALL: [MemorySource; 6] = [
        MemorySource::Conversational,
        MemorySource::LongTermUser,
        MemorySource::EpisodicEvent,
        MemorySource::Routine,
        MemorySource::Context,
        MemorySource::Working,
    ];
}

impl fmt::Display for MemorySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

/// One dialogue turn. `token_count` is cached at construction and always
/// equals `count_tokens(content)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: String,
    pub session_id: String,
    pub role: Role,
    pub ts_ms: i64,
    pub content: String,
    #[serde(skip, default)]
    pub token_count: usize,
}

impl Message {
    pub fn new(
        session_id: impl Into<String>,
        role: Role,
        content: impl Into<String>,
        ts_ms: i64,
    ) -> Message {
        let content = content.into();
        let token_count = count_tokens(&content);
        Message {
            id: String::new(),
            session_id: session_id.into(),
            role,
            ts_ms,
            content,
            token_count,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Message {
        self.id = id.into();
        self
    }

    /// Serializes to the canonical one-record-per-line JSON format used by
    /// logs, replay, and the harness.
    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    /// Parses one JSONL record, recomputing the cached token count.
    pub fn from_jsonl(line: &str) -> Result<Message> {
        let mut msg: Message = serde_json::from_str(line)?;
        msg.token_count = count_tokens(&msg.content);
        Ok(msg)
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Why a message was rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedReason {
    /// Content trims to the empty string.
    Empty,
    /// Role is not one of user/assistant/system.
    UnknownRole,
    /// Content exceeds the configured maximum token count.
    Oversize,
}

impl fmt::Display for MalformedReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MalformedReason::Empty => f.write_str("empty"),
            MalformedReason::UnknownRole => f.write_str("unknown role"),
            MalformedReason::Oversize => f.write_str("oversize"),
        }
    }
}

/// Validation outcome. Malformed input is a value, not a failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validity {
    Valid,
    Malformed(MalformedReason),
}

impl Validity {
    pub fn is_valid(&self) -> bool {
        matches!(self, Validity::Valid)
    }
}

/// Validates a message with the default size limit. Pure: same inputs,
/// same result.
pub fn validate_message(role: &str, content: &str) -> Validity {
    validate_message_with_limit(role, content, DEFAULT_MAX_MESSAGE_TOKENS)
}

pub fn validate_message_with_limit(role: &str, content: &str, max_tokens: usize) -> Validity {
    if Role::parse(role).is_none() {
        return Validity::Malformed(MalformedReason::UnknownRole);
    }
    validate_content(content, max_tokens)
}

/// Role-independent half of validation, for callers that already hold a
/// typed [`Role`].
pub fn validate_content(content: &str, max_tokens: usize) -> Validity {
    if content.trim().is_empty() {
        return Validity::Malformed(MalformedReason::Empty);
    }
    if count_tokens(content) > max_tokens {
        return Validity::Malformed(MalformedReason::Oversize);
    }
    Validity::Valid
}

// ---------------------------------------------------------------------------
// Token budget
// ---------------------------------------------------------------------------

/// Whole-assembly token budget plus per-layer fractions.
///
/// Fractions not present in the map default to zero; the sum of all
/// fractions must not exceed 1.0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenBudget {
    pub total: usize,
    pub per_layer_fractions: BTreeMap<MemorySource, f64>,
}

impl Default for TokenBudget {
    fn default() -> Self {
        TokenBudget::with_total(DEFAULT_TOKEN_BUDGET)
    }
}

impl TokenBudget {
    /// Default layer split: bio 10%, context 5%, reminders 5%, working 10%,
    /// conversation 70%.
    pub fn with_total(total: usize) -> TokenBudget {
        let mut per_layer_fractions = BTreeMap::new();
        per_layer_fractions.insert(MemorySource::LongTermUser, 0.10);
        per_layer_fractions.insert(MemorySource::Context, 0.05);
        per_layer_fractions.insert(MemorySource::EpisodicEvent, 0.05);
        per_layer_fractions.insert(MemorySource::Working, 0.10);
        per_layer_fractions.insert(MemorySource::Conversational, 0.70);
        TokenBudget {
            total,
            per_layer_fractions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total == 0 {
            return Err(MemoryError::InvalidInput(
                "token budget total must be positive".into(),
            ));
        }
        let mut sum = 0.0;
        for (source, f) in &self.per_layer_fractions {
            if !(0.0..=1.0).contains(f) {
                return Err(MemoryError::InvalidInput(format!(
                    "fraction for {source} out of [0,1]: {f}"
                )));
            }
            sum += f;
        }
        // Tolerate float noise right at 1.0.
        if sum > 1.0 + 1e-9 {
            return Err(MemoryError::InvalidInput(format!(
                "per-layer fractions sum to {sum} > 1.0"
            )));
        }
        Ok(())
    }

    pub fn fraction(&self, source: MemorySource) -> f64 {
        self.per_layer_fractions.get(&source).copied().unwrap_or(0.0)
    }

    /// Token allocation for one layer out of `available` tokens, rounded
    /// down so section sums never exceed the whole. The epsilon absorbs
    /// float representation noise (0.70 * 90000 must be 63000, not 62999).
    pub fn section_tokens(&self, source: MemorySource, available: usize) -> usize {
        (self.fraction(source) * available as f64 + 1e-6).floor() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn count_tokens_forced_cases() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("abcdefgh"), 2);
        assert_eq!(count_tokens("abcdefghi"), 3);
        assert_eq!(count_tokens("a"), 1);
    }

    #[test]
    fn validate_message_cases() {
        assert_eq!(
            validate_message("user", ""),
            Validity::Malformed(MalformedReason::Empty)
        );
        assert_eq!(
            validate_message("user", "   \n"),
            Validity::Malformed(MalformedReason::Empty)
        );
        assert_eq!(validate_message("user", "hola"), Validity::Valid);
        assert_eq!(
            validate_message("wizard", "hola"),
            Validity::Malformed(MalformedReason::UnknownRole)
        );
        let oversize = "x".repeat((DEFAULT_MAX_MESSAGE_TOKENS + 1) * 4);
        assert_eq!(
            validate_message("user", &oversize),
            Validity::Malformed(MalformedReason::Oversize)
        );
    }

    #[test]
    fn jsonl_roundtrip_recomputes_token_count() {
        let msg = Message::new("s1", Role::User, "hello there", 1234).with_id("s1:0");
        let line = msg.to_jsonl();
        let back = Message::from_jsonl(&line).unwrap();
        assert_eq!(back, msg);
        assert_eq!(back.token_count, count_tokens("hello there"));
    }

    #[test]
    fn budget_defaults_and_validation() {
        let b = TokenBudget::default();
        assert_eq!(b.total, 90_000);
        b.validate().unwrap();
        assert_eq!(b.section_tokens(MemorySource::Conversational, b.total), 63_000);
        assert_eq!(b.section_tokens(MemorySource::Routine, b.total), 0);

        let mut bad = TokenBudget::with_total(100);
        bad.per_layer_fractions.insert(MemorySource::Routine, 0.9);
        assert!(bad.validate().is_err());
        assert!(TokenBudget::with_total(0).validate().is_err());
    }

    #[test]
    fn truncate_to_tokens_respects_char_boundaries() {
        let s = "héllo wörld"; // multi-byte chars
        let t = truncate_to_tokens(s, 2);
        assert!(count_tokens(t) <= 2);
        assert!(s.starts_with(t));
        assert_eq!(truncate_to_tokens("abc", 100), "abc");
        assert_eq!(truncate_to_tokens("abcdefgh", 1), "abcd");
    }

    proptest! {
        #[test]
        fn count_tokens_subadditive(a in ".{0,200}", b in ".{0,200}") {
            let joined = format!("{a}{b}");
            let ca = count_tokens(&a);
            let cb = count_tokens(&b);
            let cj = count_tokens(&joined);
            prop_assert!(cj <= ca + cb + 1);
            prop_assert!(cj >= ca.max(cb));
        }

        #[test]
        fn valid_messages_have_positive_tokens(content in "\\PC{1,100}") {
            if validate_message("user", &content).is_valid() {
                prop_assert!(count_tokens(&content) >= 1);
            }
        }

        #[test]
        fn truncation_always_fits(s in ".{0,400}", cap in 0usize..64) {
            let t = truncate_to_tokens(&s, cap);
            prop_assert!(count_tokens(t) <= cap);
        }
    }
}
