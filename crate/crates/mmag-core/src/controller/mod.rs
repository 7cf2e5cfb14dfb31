//! The memory controller: orchestrates the five layers.
//!
//! One place decides what reaches the prompt. Reactive retrieval scores
//! candidates from every layer against the live query; proactive ticks
//! drain due events and routine cues into a consume-once reminder queue;
//! prompt assembly spends a token budget across per-layer sections with
//! unused room rolling into the conversation slice; conflict resolution
//! generates a candidate response per policy and keeps the best one.

pub mod policy;
pub mod scoring;

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::backend::{to_chat_messages, GenerationBackend};
use crate::clock::{day_of_week, hour_of_day, Clock, MS_PER_DAY};
use crate::context::{fresh_only, render_context, ContextRegistry, ContextSignal};
use crate::conv::ConversationStore;
use crate::episodic::EpisodicStore;
use crate::error::{MemoryError, Result};
use crate::longterm::{sentences, LongTermStore};
use crate::model::{
    count_tokens, truncate_to_tokens, validate_message, MemorySource, Role, TokenBudget, Validity,
};
use crate::working::WorkingMemory;

pub use policy::{Policy, PolicyName};
pub use scoring::{cosine_tf, rank, score_candidates, score_candidates_seq, score_item};
pub use scoring::{Candidate, RetrievedItem};

/// How far ahead a proactive tick looks for due events.
pub const DEFAULT_REMINDER_LOOKAHEAD_MS: i64 = 15 * 60_000;
/// Turns considered "recent" (covered by plain history); reactive retrieval
/// searches only older turns.
pub const DEFAULT_RECENCY_WINDOW_TURNS: usize = 8;

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub budget: TokenBudget,
    pub reminder_lookahead_ms: i64,
    pub recency_window_turns: usize,
    pub routine_window_days: u32,
    pub routine_min_support: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            budget: TokenBudget::default(),
            reminder_lookahead_ms: DEFAULT_REMINDER_LOOKAHEAD_MS,
            recency_window_turns: DEFAULT_RECENCY_WINDOW_TURNS,
            routine_window_days: crate::episodic::DEFAULT_ROUTINE_WINDOW_DAYS,
            routine_min_support: crate::episodic::DEFAULT_ROUTINE_MIN_SUPPORT,
        }
    }
}

// ---------------------------------------------------------------------------
// Assembly types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptSegment {
    pub role: Role,
    pub content: String,
    pub source: MemorySource,
    pub token_count: usize,
}

/// Per-candidate scoring record, kept for every candidate whether or not
/// it made the assembly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub section: &'static str,
    pub source: MemorySource,
    pub label: String,
    pub score: f64,
    pub tokens: usize,
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptAssembly {
    pub segments: Vec<PromptSegment>,
    pub total_tokens: usize,
    pub policy_used: PolicyName,
    pub trace: Vec<TraceRecord>,
}

impl PromptAssembly {
    /// Deterministic text form, used for prompt trace files and scans.
    pub fn rendered(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            out.push_str(&format!("{}({}): {}\n", seg.role, seg.source, seg.content));
        }
        out
    }
}

/// A pending proactive reminder, consumed by exactly one assembly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reminder {
    pub content: String,
    pub source: MemorySource,
    pub ts_ms: i64,
}

/// Outcome of conflict resolution across policies.
#[derive(Debug, Clone, Serialize)]
pub struct ConflictResolution {
    pub response: String,
    pub selected: PolicyName,
    pub trace: Vec<CandidateTrace>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateTrace {
    pub policy: PolicyName,
    pub response: Option<String>,
    pub score: Option<f64>,
    pub trait_overlap: f64,
    pub conversation_overlap: f64,
    pub length_score: f64,
    pub error: Option<String>,
}

// ---------------------------------------------------------------------------
// Controller
// ---------------------------------------------------------------------------

pub struct MemoryController {
    pub conv: Arc<ConversationStore>,
    pub longterm: Arc<LongTermStore>,
    pub episodic: Arc<EpisodicStore>,
    pub context: Arc<ContextRegistry>,
    pub working: Arc<WorkingMemory>,
    clock: Arc<dyn Clock>,
    config: ControllerConfig,
    pending: Mutex<HashMap<String, VecDeque<Reminder>>>,
    /// (user, topic, day index) routine reminders already injected, so a
    /// cue nudges once per day, not once per tick.
    routine_delivered: Mutex<HashSet<(String, String, i64)>>,
}

impl MemoryController {
    pub fn new(
        conv: Arc<ConversationStore>,
        longterm: Arc<LongTermStore>,
        episodic: Arc<EpisodicStore>,
        context: Arc<ContextRegistry>,
        working: Arc<WorkingMemory>,
        clock: Arc<dyn Clock>,
        config: ControllerConfig,
    ) -> MemoryController {
        MemoryController {
            conv,
            longterm,
            episodic,
            context,
            working,
            clock,
            config,
            pending: Mutex::new(HashMap::new()),
            routine_delivered: Mutex::new(HashSet::new()),
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    // -- reactive retrieval --------------------------------------------------

    /// Gathers candidates from every layer, scores them under the policy,
    /// and returns the top `k`. Ties break on earlier timestamp, then
    /// lexicographic content. Empty layers just contribute nothing.
    pub fn react_retrieve(
        &self,
        user_id: &str,
        session_id: &str,
        query_text: &str,
        now_ms: i64,
        policy: &Policy,
        k: usize,
    ) -> Result<Vec<RetrievedItem>> {
        if k == 0 {
            return Err(MemoryError::InvalidInput("k must be >= 1".into()));
        }
        let candidates = self.gather_candidates(user_id, session_id, now_ms)?;
        let mut scored = score_candidates(candidates, query_text, now_ms, policy);
        rank(&mut scored);
        scored.truncate(k);
        Ok(scored)
    }

    fn gather_candidates(
        &self,
        user_id: &str,
        session_id: &str,
        now_ms: i64,
    ) -> Result<Vec<Candidate>> {
        let mut candidates = Vec::new();

        for entry in self.longterm.get_traits(user_id)? {
            candidates.push(Candidate::new(
                MemorySource::LongTermUser,
                format!("{}: {}", entry.key, entry.value),
                entry.updated_ms,
            ));
        }
        if let Some(bio) = self.longterm.get_cached_bio(user_id)? {
            for sentence in sentences(&bio.text) {
                let sentence = sentence.trim();
                if !sentence.is_empty() {
                    candidates.push(Candidate::new(
                        MemorySource::LongTermUser,
                        sentence,
                        bio.updated_ms,
                    ));
                }
            }
        }
        for event in
            self.episodic
                .peek_due(user_id, now_ms, self.config.reminder_lookahead_ms)?
        {
            candidates.push(Candidate::new(
                MemorySource::EpisodicEvent,
                event.payload,
                event.fire_at_ms,
            ));
        }
        for cue in self.episodic.detect_routines(
            user_id,
            now_ms,
            self.config.routine_window_days,
            self.config.routine_min_support,
        )? {
            candidates.push(Candidate::new(
                MemorySource::Routine,
                routine_reminder_text(&cue.topic),
                now_ms,
            ));
        }
        for signal in fresh_only(self.context.snapshot(user_id, now_ms), now_ms) {
            candidates.push(Candidate::new(
                MemorySource::Context,
                format!("{}={}", signal.kind.name(), signal.value),
                signal.observed_ms,
            ));
        }
        for item in self.working.dump(session_id) {
            candidates.push(Candidate::new(
                MemorySource::Working,
                format!("{}: {}", item.key, item.value),
                item.written_ms,
            ));
        }
        for turn in self
            .conv
            .turns_before_recent(session_id, self.config.recency_window_turns)?
        {
            candidates.push(Candidate::new(
                MemorySource::Conversational,
                turn.content,
                turn.ts_ms,
            ));
        }
        Ok(candidates)
    }

    // -- proactive ticks -----------------------------------------------------

    /// Drains due events and currently-matching routine cues into the
    /// pending reminder queue. Each reminder is later consumed by exactly
    /// one assembly. Returns what this tick enqueued.
    pub fn proactive_tick(&self, user_id: &str, now_ms: i64) -> Result<Vec<Reminder>> {
        let mut injected = Vec::new();

        for event in
            self.episodic
                .due_events(user_id, now_ms, self.config.reminder_lookahead_ms)?
        {
            injected.push(Reminder {
                content: format!("Upcoming: {}", event.payload),
                source: MemorySource::EpisodicEvent,
                ts_ms: event.fire_at_ms,
            });
        }

        let dow = day_of_week(now_ms);
        let slot = hour_of_day(now_ms) / 3;
        let day_index = now_ms.div_euclid(MS_PER_DAY);
        let cues = self.episodic.detect_routines(
            user_id,
            now_ms,
            self.config.routine_window_days,
            self.config.routine_min_support,
        )?;
        for cue in cues {
            if cue.day_of_week != dow || cue.slot != slot {
                continue;
            }
            let dedup_key = (user_id.to_string(), cue.topic.clone(), day_index);
            if !self.routine_delivered.lock().unwrap().insert(dedup_key) {
                continue;
            }
            injected.push(Reminder {
                content: routine_reminder_text(&cue.topic),
                source: MemorySource::Routine,
                ts_ms: now_ms,
            });
        }

        if !injected.is_empty() {
            let mut pending = self.pending.lock().unwrap();
            pending
                .entry(user_id.to_string())
                .or_default()
                .extend(injected.iter().cloned());
        }
        Ok(injected)
    }

    pub fn pending_reminders(&self, user_id: &str) -> usize {
        self.pending
            .lock()
            .unwrap()
            .get(user_id)
            .map(|q| q.len())
            .unwrap_or(0)
    }

    /// Atomically takes the whole pending queue for a user.
    fn drain_reminders(&self, user_id: &str) -> Vec<Reminder> {
        self.pending
            .lock()
            .unwrap()
            .get_mut(user_id)
            .map(|q| q.drain(..).collect())
            .unwrap_or_default()
    }

    fn requeue_reminders(&self, user_id: &str, leftovers: Vec<Reminder>) {
        if leftovers.is_empty() {
            return;
        }
        let mut pending = self.pending.lock().unwrap();
        let queue = pending.entry(user_id.to_string()).or_default();
        for reminder in leftovers.into_iter().rev() {
            queue.push_front(reminder);
        }
    }

    // -- prompt assembly -----------------------------------------------------

    /// Builds the budgeted prompt: system bio (and traits), context line,
    /// reminders, working notes, conversation summary and turns, then the
    /// query. Sections are filled greedily by score; allocation a section
    /// does not use rolls over to the conversation slice.
    pub fn assemble_prompt(
        &self,
        user_id: &str,
        session_id: &str,
        query_text: &str,
        now_ms: i64,
        policy: &Policy,
        budget: &TokenBudget,
    ) -> Result<PromptAssembly> {
        let reminders = self.drain_reminders(user_id);
        let (assembly, leftovers) = self.assemble_with_reminders(
            user_id,
            session_id,
            query_text,
            now_ms,
            policy,
            budget,
            &reminders,
        )?;
        self.requeue_reminders(user_id, leftovers);
        Ok(assembly)
    }

    /// Assembly core, parameterized over an already-drained reminder batch
    /// so conflict resolution can offer the same reminders to every
    /// candidate prompt. Returns the reminders that did not fit.
    #[allow(clippy::too_many_arguments)]
    fn assemble_with_reminders(
        &self,
        user_id: &str,
        session_id: &str,
        query_text: &str,
        now_ms: i64,
        policy: &Policy,
        budget: &TokenBudget,
        reminders: &[Reminder],
    ) -> Result<(PromptAssembly, Vec<Reminder>)> {
        budget.validate()?;
        if let Validity::Malformed(reason) = validate_message("user", query_text) {
            return Err(MemoryError::InvalidMessage(reason.to_string()));
        }
        let query_tokens = count_tokens(query_text);
        if query_tokens > budget.total {
            return Err(MemoryError::InvalidInput(format!(
                "query needs {query_tokens} tokens, budget is {}",
                budget.total
            )));
        }
        let available = budget.total - query_tokens;
        let mut trace: Vec<TraceRecord> = Vec::new();
        let mut segments: Vec<PromptSegment> = Vec::new();

        // Long-term section: the bio as one system segment, then consented
        // traits by score in the remaining allocation.
        let bio_alloc = budget.section_tokens(MemorySource::LongTermUser, available);
        let mut bio_used = 0usize;
        if let Some(bio) = self.longterm.get_cached_bio(user_id)? {
            let text = truncate_to_tokens(bio.text.trim(), bio_alloc);
            if !text.is_empty() {
                let seg = segment(Role::System, text, MemorySource::LongTermUser);
                bio_used += seg.token_count;
                trace.push(trace_record("bio", &seg, 1.0, true));
                segments.push(seg);
            }
        }
        let trait_candidates: Vec<Candidate> = self
            .longterm
            .get_traits(user_id)?
            .into_iter()
            .map(|t| {
                Candidate::new(
                    MemorySource::LongTermUser,
                    format!("{}: {}", t.key, t.value),
                    t.updated_ms,
                )
            })
            .collect();
        let mut scored_traits = score_candidates(trait_candidates, query_text, now_ms, policy);
        rank(&mut scored_traits);
        for item in scored_traits {
            let tokens = count_tokens(&item.content);
            let fits = bio_used + tokens <= bio_alloc;
            if fits {
                let seg = segment(Role::System, &item.content, MemorySource::LongTermUser);
                bio_used += seg.token_count;
                trace.push(trace_record("bio", &seg, item.score, true));
                segments.push(seg);
            } else {
                trace.push(TraceRecord {
                    section: "bio",
                    source: item.source,
                    label: preview(&item.content),
                    score: item.score,
                    tokens,
                    included: false,
                });
            }
        }

        // Context section: one rendered line over the fresh signals that
        // fit, chosen greedily by score.
        let ctx_alloc = budget.section_tokens(MemorySource::Context, available);
        let mut ctx_used = 0usize;
        {
            let signals = fresh_only(self.context.snapshot(user_id, now_ms), now_ms);
            let mut scored: Vec<(ContextSignal, f64)> = signals
                .into_iter()
                .map(|s| {
                    let candidate = Candidate::new(
                        MemorySource::Context,
                        format!("{}={}", s.kind.name(), s.value),
                        s.observed_ms,
                    );
                    let (_, score) = score_item(&candidate, query_text, now_ms, policy);
                    (s, score)
                })
                .collect();
            scored.sort_by(|a, b| {
                b.1.total_cmp(&a.1)
                    .then_with(|| a.0.kind.name().cmp(b.0.kind.name()))
            });
            let mut chosen: Vec<ContextSignal> = Vec::new();
            for (signal, score) in scored {
                let mut attempt = chosen.clone();
                attempt.push(signal.clone());
                let line = render_context(&attempt);
                let fits = count_tokens(&line) <= ctx_alloc;
                trace.push(TraceRecord {
                    section: "context",
                    source: MemorySource::Context,
                    label: preview(&format!("{}={}", signal.kind.name(), signal.value)),
                    score,
                    tokens: count_tokens(&format!("{}={}", signal.kind.name(), signal.value)),
                    included: fits,
                });
                if fits {
                    chosen = attempt;
                }
            }
            let line = render_context(&chosen);
            if !line.is_empty() {
                let seg = segment(Role::System, &line, MemorySource::Context);
                ctx_used = seg.token_count;
                segments.push(seg);
            }
        }

        // Reminder section: consume-once queue, greedily by score. What
        // does not fit goes back to the queue untouched.
        let rem_alloc = budget.section_tokens(MemorySource::EpisodicEvent, available);
        let mut rem_used = 0usize;
        let mut leftovers: Vec<Reminder> = Vec::new();
        {
            let mut scored: Vec<(usize, f64)> = reminders
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let candidate = Candidate::new(r.source, r.content.clone(), r.ts_ms);
                    let (_, score) = score_item(&candidate, query_text, now_ms, policy);
                    (i, score)
                })
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let mut included_idx: HashSet<usize> = HashSet::new();
            for (idx, score) in &scored {
                let reminder = &reminders[*idx];
                let tokens = count_tokens(&reminder.content);
                let fits = rem_used + tokens <= rem_alloc;
                trace.push(TraceRecord {
                    section: "reminders",
                    source: reminder.source,
                    label: preview(&reminder.content),
                    score: *score,
                    tokens,
                    included: fits,
                });
                if fits {
                    rem_used += tokens;
                    included_idx.insert(*idx);
                }
            }
            // Keep original queue order both in the prompt and in leftovers.
            for (idx, reminder) in reminders.iter().enumerate() {
                if included_idx.contains(&idx) {
                    segments.push(segment(Role::System, &reminder.content, reminder.source));
                } else {
                    leftovers.push(reminder.clone());
                }
            }
        }

        // Working section: scratchpad notes by score.
        let work_alloc = budget.section_tokens(MemorySource::Working, available);
        let mut work_used = 0usize;
        {
            let items = self.working.dump(session_id);
            let candidates: Vec<Candidate> = items
                .iter()
                .map(|i| {
                    Candidate::new(
                        MemorySource::Working,
                        format!("{}: {}", i.key, i.value),
                        i.written_ms,
                    )
                })
                .collect();
            let mut scored = score_candidates(candidates, query_text, now_ms, policy);
            rank(&mut scored);
            for item in scored {
                let tokens = count_tokens(&item.content);
                let fits = work_used + tokens <= work_alloc;
                trace.push(TraceRecord {
                    section: "working",
                    source: MemorySource::Working,
                    label: preview(&item.content),
                    score: item.score,
                    tokens,
                    included: fits,
                });
                if fits {
                    work_used += tokens;
                    segments.push(segment(Role::System, &item.content, MemorySource::Working));
                }
            }
        }

        // Conversation section: its own fraction plus everything the other
        // sections left unused, including rounding slack.
        let conv_alloc = available - bio_used - ctx_used - rem_used - work_used;
        if conv_alloc > 0 {
            let (turns, report) = self.conv.history(session_id, conv_alloc)?;
            if let Some(summary) = report.summary {
                let seg = segment(Role::System, &summary.content, MemorySource::Conversational);
                trace.push(trace_record("summary", &seg, 1.0, true));
                segments.push(seg);
            }
            for turn in turns {
                segments.push(PromptSegment {
                    role: turn.role,
                    content: turn.content,
                    source: MemorySource::Conversational,
                    token_count: turn.token_count,
                });
            }
        }

        // The live query always closes the prompt.
        segments.push(segment(Role::User, query_text, MemorySource::Conversational));

        let total_tokens = segments.iter().map(|s| s.token_count).sum();
        let assembly = PromptAssembly {
            segments,
            total_tokens,
            policy_used: policy.name,
            trace,
        };
        debug_assert!(assembly.total_tokens <= budget.total);
        Ok((assembly, leftovers))
    }

    // -- conflict resolution ---------------------------------------------

    /// Assembles one prompt per policy, generates a candidate response for
    /// each, and keeps the one scoring highest on
    /// `0.4*trait overlap + 0.4*recent-turn overlap + 0.2*length`. Failed
    /// candidates are skipped; ties break on policy enum order.
    pub fn resolve_conflict(
        &self,
        user_id: &str,
        session_id: &str,
        query_text: &str,
        now_ms: i64,
        policies: &[Policy],
        backend: &dyn GenerationBackend,
    ) -> Result<ConflictResolution> {
        let mut names: Vec<PolicyName> = policies.iter().map(|p| p.name).collect();
        names.sort();
        names.dedup();
        if names.len() < 2 {
            return Err(MemoryError::InvalidInput(
                "conflict resolution needs at least two distinct policies".into(),
            ));
        }

        let trait_text = self
            .longterm
            .get_traits(user_id)?
            .iter()
            .map(|t| t.value.clone())
            .collect::<Vec<_>>()
            .join(" ");
        let recent_text = self
            .conv
            .recent_turns(session_id, 5)?
            .iter()
            .map(|m| m.content.clone())
            .collect::<Vec<_>>()
            .join(" ");

        // One reminder drain for the whole arbitration: every candidate
        // sees the same queue, the user sees each reminder once.
        let reminders = self.drain_reminders(user_id);
        let mut trace = Vec::new();
        let mut best: Option<(f64, PolicyName, String, Vec<Reminder>)> = None;

        for policy in policies {
            let (assembly, leftovers) = match self.assemble_with_reminders(
                user_id,
                session_id,
                query_text,
                now_ms,
                policy,
                &self.config.budget,
                &reminders,
            ) {
                Ok(pair) => pair,
                Err(e @ MemoryError::InvalidMessage(_)) => return Err(e),
                Err(e) => {
                    trace.push(CandidateTrace {
                        policy: policy.name,
                        response: None,
                        score: None,
                        trait_overlap: 0.0,
                        conversation_overlap: 0.0,
                        length_score: 0.0,
                        error: Some(e.to_string()),
                    });
                    continue;
                }
            };
            let messages = to_chat_messages(&assembly);
            match backend.generate(&messages, 0) {
                Ok(response) => {
                    let trait_overlap = cosine_tf(&response, &trait_text);
                    let conversation_overlap = cosine_tf(&response, &recent_text);
                    let length_score = (count_tokens(&response) as f64 / 64.0).min(1.0);
                    let score =
                        0.4 * trait_overlap + 0.4 * conversation_overlap + 0.2 * length_score;
                    trace.push(CandidateTrace {
                        policy: policy.name,
                        response: Some(response.clone()),
                        score: Some(score),
                        trait_overlap,
                        conversation_overlap,
                        length_score,
                        error: None,
                    });
                    let better = match &best {
                        None => true,
                        Some((best_score, best_name, _, _)) => {
                            score > *best_score
                                || (score == *best_score && policy.name < *best_name)
                        }
                    };
                    if better {
                        best = Some((score, policy.name, response, leftovers));
                    }
                }
                Err(e) => {
                    trace.push(CandidateTrace {
                        policy: policy.name,
                        response: None,
                        score: None,
                        trait_overlap: 0.0,
                        conversation_overlap: 0.0,
                        length_score: 0.0,
                        error: Some(e.to_string()),
                    });
                }
            }
        }

        match best {
            Some((_, selected, response, leftovers)) => {
                self.requeue_reminders(user_id, leftovers);
                Ok(ConflictResolution {
                    response,
                    selected,
                    trace,
                })
            }
            None => {
                // Nothing survived; put the reminders back untouched.
                self.requeue_reminders(user_id, reminders);
                Err(MemoryError::backend(
                    "all candidate generations failed during conflict resolution",
                ))
            }
        }
    }
}

pub fn routine_reminder_text(topic: &str) -> String {
    format!("You often discuss {topic} around this time.")
}

fn segment(role: Role, content: &str, source: MemorySource) -> PromptSegment {
    PromptSegment {
        role,
        content: content.to_string(),
        source,
        token_count: count_tokens(content),
    }
}

fn trace_record(
    section: &'static str,
    seg: &PromptSegment,
    score: f64,
    included: bool,
) -> TraceRecord {
    TraceRecord {
        section,
        source: seg.source,
        label: preview(&seg.content),
        score,
        tokens: seg.token_count,
        included,
    }
}

fn preview(content: &str) -> String {
    let mut end = content.len().min(48);
    while end > 0 && !content.is_char_boundary(end) {
        end -= 1;
    }
    content[..end].to_string()
}
