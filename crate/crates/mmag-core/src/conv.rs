//! Conversational memory: append-only per-session dialogue logs.
//!
//! Turns are validated on the way in, persisted encrypted under the `conv`
//! namespace, and retrieved in chronological order. Retrieval never mutates
//! the log: token-based pruning keeps the most recent suffix that fits the
//! budget and reports what fell off, optionally with a deterministic
//! extractive summary of the dropped turns.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::error::{MemoryError, Result};
use crate::model::{
    count_tokens, truncate_to_tokens, validate_content, MalformedReason, Message, Role,
    DEFAULT_MAX_MESSAGE_TOKENS,
};
use crate::persist::{RecordKey, RecordStore};

pub const CONV_NAMESPACE: &str = "conv";

/// Result of one remember call. Skipping malformed input is an outcome, not
/// an error; storage trouble is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RememberOutcome {
    Stored,
    Skipped(MalformedReason),
    /// Batch-only: this message hit a storage failure.
    Failed(String),
}

/// What pruning dropped, and the summary that stands in for it when the
/// summarizer is enabled.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PruneReport {
    pub dropped_count: usize,
    pub dropped_tokens: usize,
    pub summary: Option<Message>,
}

/// Pluggable summarizer for pruned turns. The default is extractive and
/// deterministic; a backend-driven abstractive summarizer can implement
/// this instead.
pub trait TurnSummarizer: Send + Sync {
    fn summarize(&self, dropped: &[Message], cap_tokens: usize) -> String;
}

/// First sentence of each dropped turn, joined with "; ", prefixed
/// "Earlier: ", truncated to the cap.
#[derive(Debug, Default, Clone, Copy)]
pub struct ExtractiveSummarizer;

impl TurnSummarizer for ExtractiveSummarizer {
    fn summarize(&self, dropped: &[Message], cap_tokens: usize) -> String {
        summarize_dropped(dropped, cap_tokens)
    }
}

pub fn summarize_dropped(dropped: &[Message], cap_tokens: usize) -> String {
    if dropped.is_empty() {
        return String::new();
    }
    let joined = dropped
        .iter()
        .map(|m| first_sentence(m.content.trim()))
        .collect::<Vec<_>>()
        .join("; ");
    let text = format!("Earlier: {joined}");
    truncate_to_tokens(&text, cap_tokens).to_string()
}

/// Up to and including the first '.', '!' or '?', capped at 160 bytes.
pub(crate) fn first_sentence(text: &str) -> &str {
    let terminator_end = text
        .char_indices()
        .find(|(_, c)| matches!(c, '.' | '!' | '?'))
        .map(|(i, c)| i + c.len_utf8());
    let mut end = terminator_end.unwrap_or(text.len()).min(160);
    while end > 0 && !text.is_char_boundary(end) {
        end -= 1;
    }
    &text[..end]
}

struct SessionLog {
    messages: Vec<Message>,
    total_tokens: usize,
    next_seq: u64,
}

/// Append-only per-session store. One serialized writer per session,
/// unlimited concurrent readers, sessions independent of each other.
pub struct ConversationStore {
    records: Arc<RecordStore>,
    sessions: RwLock<HashMap<String, Arc<RwLock<SessionLog>>>>,
    summarizer: Option<Arc<dyn TurnSummarizer>>,
    max_message_tokens: usize,
}

impl ConversationStore {
    pub fn new(records: Arc<RecordStore>) -> ConversationStore {
        ConversationStore {
            records,
            sessions: RwLock::new(HashMap::new()),
            summarizer: Some(Arc::new(ExtractiveSummarizer)),
            max_message_tokens: DEFAULT_MAX_MESSAGE_TOKENS,
        }
    }

    pub fn without_summarizer(mut self) -> ConversationStore {
        self.summarizer = None;
        self
    }

    pub fn with_summarizer(mut self, summarizer: Arc<dyn TurnSummarizer>) -> ConversationStore {
        self.summarizer = Some(summarizer);
        self
    }

    /// Loads (or creates) the in-memory view of one session, rebuilding it
    /// from the encrypted records on first touch after a restart.
    fn session(&self, session_id: &str) -> Result<Arc<RwLock<SessionLog>>> {
        if let Some(log) = self.sessions.read().unwrap().get(session_id) {
            return Ok(log.clone());
        }
        let mut sessions = self.sessions.write().unwrap();
        if let Some(log) = sessions.get(session_id) {
            return Ok(log.clone());
        }
        let mut messages = Vec::new();
        for key in self.records.list(CONV_NAMESPACE, session_id)? {
            let bytes = self.records.get(&key)?;
            let line = String::from_utf8(bytes)
                .map_err(|_| MemoryError::Storage("conversation record not utf-8".into()))?;
            messages.push(Message::from_jsonl(&line)?);
        }
        // Record ids are zero-padded sequence numbers, so list order is
        // chronological already.
        let total_tokens = messages.iter().map(|m| m.token_count).sum();
        let next_seq = messages.len() as u64;
        let log = Arc::new(RwLock::new(SessionLog {
            messages,
            total_tokens,
            next_seq,
        }));
        sessions.insert(session_id.to_string(), log.clone());
        Ok(log)
    }

    /// Validates and appends one turn. Malformed messages are skipped with
    /// the reason; valid ones are durable once this returns.
    pub fn remember(&self, mut message: Message) -> Result<RememberOutcome> {
        if let crate::model::Validity::Malformed(reason) =
            validate_content(&message.content, self.max_message_tokens)
        {
            return Ok(RememberOutcome::Skipped(reason));
        }
        let log = self.session(&message.session_id)?;
        let mut log = log.write().unwrap();

        // Log order is chronological; clamp regressions from caller clocks.
        if let Some(last) = log.messages.last() {
            if message.ts_ms < last.ts_ms {
                message.ts_ms = last.ts_ms;
            }
        }
        let seq = log.next_seq;
        if message.id.is_empty() {
            message.id = format!("{}:{}", message.session_id, seq);
        }
        message.token_count = count_tokens(&message.content);

        let key = RecordKey::new(CONV_NAMESPACE, &message.session_id, format!("{seq:08}"));
        self.records.put(&key, message.to_jsonl().as_bytes())?;

        log.next_seq = seq + 1;
        log.total_tokens += message.token_count;
        log.messages.push(message);
        Ok(RememberOutcome::Stored)
    }

    /// `remember` applied in order; atomic per message, never per batch.
    /// The result list is positionally aligned with the input.
    pub fn remember_batch(&self, messages: Vec<Message>) -> Vec<RememberOutcome> {
        messages
            .into_iter()
            .map(|m| match self.remember(m) {
                Ok(outcome) => outcome,
                Err(e) => RememberOutcome::Failed(e.to_string()),
            })
            .collect()
    }

    /// Most recent turns whose token sum fits the budget, in chronological
    /// order, plus a report of the dropped prefix. When the summarizer is
    /// enabled the leftover budget carries a system summary of the dropped
    /// turns, so the combined output still fits the budget.
    pub fn history(&self, session_id: &str, budget: usize) -> Result<(Vec<Message>, PruneReport)> {
        if budget == 0 {
            return Err(MemoryError::InvalidInput(
                "history budget must be positive".into(),
            ));
        }
        if !self.sessions.read().unwrap().contains_key(session_id)
            && self.records.list(CONV_NAMESPACE, session_id)?.is_empty()
        {
            // Unknown session: empty history, not an error.
            return Ok((Vec::new(), PruneReport::default()));
        }
        let log = self.session(session_id)?;
        let log = log.read().unwrap();

        // Stream token counts from the tail; cost tracks the returned slice.
        let mut kept_tokens = 0usize;
        let mut start = log.messages.len();
        while start > 0 {
            let next = log.messages[start - 1].token_count;
            if kept_tokens + next > budget {
                break;
            }
            kept_tokens += next;
            start -= 1;
        }

        let kept = log.messages[start..].to_vec();
        let dropped = &log.messages[..start];
        let mut report = PruneReport {
            dropped_count: dropped.len(),
            dropped_tokens: dropped.iter().map(|m| m.token_count).sum(),
            summary: None,
        };
        if !dropped.is_empty() {
            if let Some(summarizer) = &self.summarizer {
                let cap = budget - kept_tokens;
                let text = summarizer.summarize(dropped, cap);
                if !text.trim().is_empty() {
                    let ts = dropped.last().map(|m| m.ts_ms).unwrap_or_default();
                    let msg = Message::new(session_id, Role::System, text, ts)
                        .with_id(format!("{session_id}:summary"));
                    report.summary = Some(msg);
                }
            }
        }
        Ok((kept, report))
    }

    /// Last `n` turns of a session, chronological.
    pub fn recent_turns(&self, session_id: &str, n: usize) -> Result<Vec<Message>> {
        let log = self.session(session_id)?;
        let log = log.read().unwrap();
        let start = log.messages.len().saturating_sub(n);
        Ok(log.messages[start..].to_vec())
    }

    /// Turns older than the most recent `window` ones: the slice reactive
    /// retrieval searches, since the recent window reaches the prompt via
    /// history anyway.
    pub fn turns_before_recent(&self, session_id: &str, window: usize) -> Result<Vec<Message>> {
        let log = self.session(session_id)?;
        let log = log.read().unwrap();
        let end = log.messages.len().saturating_sub(window);
        Ok(log.messages[..end].to_vec())
    }

    /// Total stored tokens for a session (all turns, pruning ignored).
    pub fn total_tokens(&self, session_id: &str) -> Result<usize> {
        let log = self.session(session_id)?;
        let log = log.read().unwrap();
        Ok(log.total_tokens)
    }

    pub fn len(&self, session_id: &str) -> Result<usize> {
        let log = self.session(session_id)?;
        let log = log.read().unwrap();
        Ok(log.messages.len())
    }

    pub fn is_empty(&self, session_id: &str) -> Result<bool> {
        Ok(self.len(session_id)? == 0)
    }

    /// Exports a session as canonical JSONL, one message per line.
    pub fn export_jsonl(&self, session_id: &str) -> Result<String> {
        let log = self.session(session_id)?;
        let log = log.read().unwrap();
        let mut out = String::new();
        for m in &log.messages {
            out.push_str(&m.to_jsonl());
            out.push('\n');
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FakeClock;
    use crate::persist::audit::AuditLog;
    use crate::persist::backend::MemoryBackend;
    use crate::persist::keyring::Keyring;
    use rand::{Rng, SeedableRng};

    fn records() -> Arc<RecordStore> {
        Arc::new(RecordStore::new(
            Arc::new(MemoryBackend::new()),
            Keyring::generate("kek-1"),
            AuditLog::ephemeral(),
            Arc::new(FakeClock::at(0)),
        ))
    }

    fn msg(session: &str, content: &str, ts: i64) -> Message {
        Message::new(session, Role::User, content, ts)
    }

    #[test]
    fn remember_appends_in_order() {
        let store = ConversationStore::new(records());
        for (i, text) in ["first", "second", "third"].iter().enumerate() {
            let out = store.remember(msg("s1", text, i as i64)).unwrap();
            assert_eq!(out, RememberOutcome::Stored);
        }
        let (turns, report) = store.history("s1", 10_000).unwrap();
        assert_eq!(
            turns.iter().map(|m| m.content.as_str()).collect::<Vec<_>>(),
            vec!["first", "second", "third"]
        );
        assert_eq!(report.dropped_count, 0);
    }

    #[test]
    fn empty_content_is_skipped() {
        let store = ConversationStore::new(records());
        let out = store.remember(msg("s1", "", 0)).unwrap();
        assert_eq!(out, RememberOutcome::Skipped(MalformedReason::Empty));
        assert_eq!(store.len("s1").unwrap(), 0);
    }

    #[test]
    fn batch_results_align_positionally() {
        let store = ConversationStore::new(records());
        let outcomes = store.remember_batch(vec![
            msg("s1", "valid one", 0),
            msg("s1", "   ", 1),
            msg("s1", "valid two", 2),
        ]);
        assert_eq!(
            outcomes,
            vec![
                RememberOutcome::Stored,
                RememberOutcome::Skipped(MalformedReason::Empty),
                RememberOutcome::Stored,
            ]
        );
        assert_eq!(store.len("s1").unwrap(), 2);
        assert!(store.remember_batch(vec![]).is_empty());
    }

    #[test]
    fn batch_of_100_preserves_order() {
        let store = ConversationStore::new(records());
        let msgs: Vec<Message> = (0..100).map(|i| msg("s1", &format!("turn {i}"), i)).collect();
        let outcomes = store.remember_batch(msgs);
        assert!(outcomes.iter().all(|o| *o == RememberOutcome::Stored));
        let (turns, _) = store.history("s1", usize::MAX / 2).unwrap();
        assert_eq!(turns.len(), 100);
        assert!(turns.windows(2).all(|w| w[0].ts_ms <= w[1].ts_ms));
        assert_eq!(turns[41].content, "turn 41");
    }

    #[test]
    fn history_keeps_maximal_suffix() {
        let store = ConversationStore::new(records());
        // 6 tokens each: 24 bytes.
        for i in 0..3 {
            store
                .remember(msg("s1", &"x".repeat(24), i))
                .unwrap();
        }
        let (turns, report) = store.history("s1", 10).unwrap();
        assert_eq!(turns.len(), 1);
        assert_eq!(report.dropped_count, 2);
        assert_eq!(report.dropped_tokens, 12);
        // Suffix maximality: pulling back the newest dropped turn overflows.
        assert!(turns.iter().map(|m| m.token_count).sum::<usize>() + 6 > 10);
    }

    #[test]
    fn exact_budget_keeps_everything() {
        let store = ConversationStore::new(records());
        for i in 0..3 {
            store.remember(msg("s1", &"y".repeat(24), i)).unwrap();
        }
        let (turns, report) = store.history("s1", 18).unwrap();
        assert_eq!(turns.len(), 3);
        assert_eq!(report.dropped_count, 0);
        assert!(report.summary.is_none());
    }

    #[test]
    fn unknown_session_is_empty_history() {
        let store = ConversationStore::new(records());
        let (turns, report) = store.history("nope", 100).unwrap();
        assert!(turns.is_empty());
        assert_eq!(report.dropped_count, 0);
    }

    #[test]
    fn zero_budget_is_rejected() {
        let store = ConversationStore::new(records());
        assert!(store.history("s1", 0).is_err());
    }

    #[test]
    fn summary_of_dropped_fits_leftover_budget() {
        let store = ConversationStore::new(records());
        store
            .remember(msg("s1", "I live in Rome. I like pasta.", 0))
            .unwrap();
        store.remember(msg("s1", &"z".repeat(24), 1)).unwrap();
        // Budget 10 keeps only the 6-token tail, leaves 4 for the summary.
        let (turns, report) = store.history("s1", 10).unwrap();
        assert_eq!(turns.len(), 1);
        let summary = report.summary.expect("summary present");
        assert_eq!(summary.role, Role::System);
        assert!(summary.content.starts_with("Earlier: "));
        let total: usize = turns.iter().map(|m| m.token_count).sum::<usize>() + summary.token_count;
        assert!(total <= 10);
    }

    #[test]
    fn summarize_dropped_first_sentence_rule() {
        let one = vec![msg("s", "I live in Rome. I like pasta.", 0)];
        assert_eq!(summarize_dropped(&one, 1000), "Earlier: I live in Rome.");

        let two = vec![
            msg("s", "I live in Rome. I like pasta.", 0),
            msg("s", "Travel is fun! Really.", 1),
        ];
        assert_eq!(
            summarize_dropped(&two, 1000),
            "Earlier: I live in Rome.; Travel is fun!"
        );

        // No terminator: cut at 160 bytes.
        let long = vec![msg("s", &"w".repeat(300), 0)];
        let s = summarize_dropped(&long, 1000);
        assert_eq!(s.len(), "Earlier: ".len() + 160);
    }

    #[test]
    fn summary_cap_holds_over_random_corpora() {
        // 1000 random dropped-turn sets against the token-cap contract.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let n = rng.gen_range(1..6);
            let dropped: Vec<Message> = (0..n)
                .map(|i| {
                    let len = rng.gen_range(0..300);
                    let content: String = (0..len)
                        .map(|_| {
                            let c = rng.gen_range(b'a'..=b'z');
                            if rng.gen_bool(0.08) {
                                '.'
                            } else {
                                c as char
                            }
                        })
                        .collect();
                    msg("s", &format!("x{content}"), i as i64)
                })
                .collect();
            let cap = rng.gen_range(0..64);
            let out = summarize_dropped(&dropped, cap);
            assert!(count_tokens(&out) <= cap, "cap {cap} broken: {out:?}");
        }
    }

    #[test]
    fn history_is_deterministic_and_append_only() {
        let store = ConversationStore::new(records());
        for i in 0..10 {
            store.remember(msg("s1", &format!("turn number {i}"), i)).unwrap();
        }
        let before = store.export_jsonl("s1").unwrap();
        let a = store.history("s1", 12).unwrap();
        let b = store.history("s1", 12).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.export_jsonl("s1").unwrap(), before);
    }

    #[test]
    fn sessions_reload_from_encrypted_records() {
        let records = records();
        {
            let store = ConversationStore::new(records.clone());
            store.remember(msg("s1", "durable turn", 5)).unwrap();
        }
        let store = ConversationStore::new(records);
        let (turns, _) = store.history("s1", 100).unwrap();
        assert_eq!(turns.len(), 1);
        assert_eq!(turns[0].content, "durable turn");
        assert_eq!(turns[0].id, "s1:0");
        // Appends continue the sequence after reload.
        store.remember(msg("s1", "next turn", 6)).unwrap();
        assert_eq!(store.len("s1").unwrap(), 2);
    }

    #[test]
    fn timestamps_never_regress_within_a_session() {
        let store = ConversationStore::new(records());
        store.remember(msg("s1", "later", 100)).unwrap();
        store.remember(msg("s1", "earlier clock", 40)).unwrap();
        let (turns, _) = store.history("s1", 1000).unwrap();
        assert_eq!(turns[1].ts_ms, 100);
    }

    #[test]
    fn budget_safety_and_maximality_over_random_logs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let store = ConversationStore::new(records());
        for i in 0..60 {
            let len = rng.gen_range(1..120);
            store.remember(msg("s2", &"m".repeat(len), i)).unwrap();
        }
        let (all, _) = store.history("s2", usize::MAX / 2).unwrap();
        for _ in 0..200 {
            let budget = rng.gen_range(1..200);
            let (turns, report) = store.history("s2", budget).unwrap();
            let turn_tokens: usize = turns.iter().map(|m| m.token_count).sum();
            let total =
                turn_tokens + report.summary.as_ref().map(|s| s.token_count).unwrap_or(0);
            assert!(total <= budget);
            if report.dropped_count > 0 {
                // Suffix maximality: extending the window by one more turn
                // would overflow the budget.
                let adjacent = all[all.len() - turns.len() - 1].token_count;
                assert!(turn_tokens + adjacent > budget);
            }
        }
    }
}
