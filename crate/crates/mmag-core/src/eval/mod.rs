//! Deterministic evaluation harness.
//!
//! Replays a synthetic corpus through the full stack — conversation store,
//! bio refresh, events, proactive ticks, prompt assembly, mock generation —
//! on a simulated clock, and measures the three technical metrics:
//! retrieval accuracy (is the planted fact in the probe's prompt, and
//! secondarily in the echoed response), leakage (does anything erased
//! resurface after its erasure), and assembly latency (wall time around
//! `assemble_prompt` only; generation is excluded on purpose).

pub mod corpus;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::backend::{to_chat_messages, GenerationBackend, MockBackend};
use crate::clock::{Clock, FakeClock};
use crate::context::ContextRegistry;
use crate::controller::{
    scoring::top_tf_word, ControllerConfig, MemoryController, Policy, PolicyName,
};
use crate::conv::ConversationStore;
use crate::episodic::EpisodicStore;
use crate::error::Result;
use crate::longterm::{sentences, BioSource, EraseSelector, LongTermStore};
use crate::model::{Message, Role, TokenBudget};
use crate::persist::audit::AuditLog;
use crate::persist::backend::{MemoryBackend, StorageBackend};
use crate::persist::keyring::Keyring;
use crate::persist::RecordStore;
use crate::working::WorkingMemory;
use corpus::{ScriptedTurn, SyntheticCorpus};

pub use corpus::generate_corpus;

/// Harness configuration, echoed into the report.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub budget: TokenBudget,
    pub policy: Policy,
    /// When set, every assembled prompt is dumped here, one file per
    /// assembly, for the independent scan oracle.
    pub trace_dir: Option<PathBuf>,
    /// Storage backend factory; defaults to in-memory.
    pub file_store: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            budget: TokenBudget::default(),
            policy: Policy::recency_first(),
            trace_dir: None,
            file_store: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeOutcome {
    pub fact_index: usize,
    pub session_id: String,
    pub turn: usize,
    pub value: String,
    pub prompt_hit: bool,
    pub response_hit: bool,
    /// Probe ran after its fact was erased, so it counts toward leakage,
    /// not accuracy.
    pub post_erasure: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LeakHit {
    pub session_id: String,
    pub turn: usize,
    pub value: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub seed: u64,
    pub sessions: usize,
    pub facts: usize,
    pub erasures: usize,
    pub events: usize,
    pub budget_total: usize,
    pub policy: PolicyName,
    pub backend: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    /// Fraction of live-fact probes whose assembled prompt contained the
    /// planted value. None when the corpus had nothing to probe.
    pub retrieval_accuracy: Option<f64>,
    /// Same, measured on the echoed response.
    pub response_accuracy: Option<f64>,
    /// Fraction of post-erasure assemblies containing any erased value.
    /// None when nothing was erased.
    pub leakage_rate: Option<f64>,
    pub assembly_latency_p50_ms: f64,
    pub assembly_latency_p95_ms: f64,
    pub hot_path_refresh_calls: u64,
    pub assemblies: usize,
    pub post_erasure_assemblies: usize,
    pub probes: Vec<ProbeOutcome>,
    pub leaks: Vec<LeakHit>,
    pub reminders_delivered: usize,
    pub config: ConfigEcho,
}

impl MetricsReport {
    /// Probes that missed, for diagnostics.
    pub fn misses(&self) -> Vec<&ProbeOutcome> {
        self.probes
            .iter()
            .filter(|p| !p.post_erasure && !p.prompt_hit)
            .collect()
    }

    /// Stable serialization with the wall-clock latency fields zeroed, for
    /// byte-identity comparisons across runs.
    pub fn stable_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("report serializes");
        value["assembly_latency_p50_ms"] = 0.0.into();
        value["assembly_latency_p95_ms"] = 0.0.into();
        serde_json::to_string_pretty(&value).expect("report serializes")
    }

    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
        }
        let mut out = String::new();
        out.push_str("metric                        value\n");
        out.push_str("----------------------------  ----------\n");
        out.push_str(&format!("retrieval_accuracy            {}\n", opt(self.retrieval_accuracy)));
        out.push_str(&format!("response_accuracy             {}\n", opt(self.response_accuracy)));
        out.push_str(&format!("leakage_rate                  {}\n", opt(self.leakage_rate)));
        out.push_str(&format!(
            "assembly_latency_p50_ms       {:.3}\n",
            self.assembly_latency_p50_ms
        ));
        out.push_str(&format!(
            "assembly_latency_p95_ms       {:.3}\n",
            self.assembly_latency_p95_ms
        ));
        out.push_str(&format!(
            "hot_path_refresh_calls        {}\n",
            self.hot_path_refresh_calls
        ));
        out.push_str(&format!("assemblies                    {}\n", self.assemblies));
        out.push_str(&format!(
            "post_erasure_assemblies       {}\n",
            self.post_erasure_assemblies
        ));
        out.push_str(&format!("reminders_delivered           {}\n", self.reminders_delivered));
        let misses = self.misses();
        out.push_str(&format!("misses                        {}\n", misses.len()));
        for miss in misses {
            out.push_str(&format!(
                "  miss: fact {} ({}) not in prompt at {}#{}\n",
                miss.fact_index, miss.value, miss.session_id, miss.turn
            ));
        }
        for leak in &self.leaks {
            out.push_str(&format!(
                "  LEAK: {} surfaced at {}#{}\n",
                leak.value, leak.session_id, leak.turn
            ));
        }
        out
    }
}

/// One dumped prompt trace, kept in memory for the scan oracle.
#[derive(Debug, Clone, Serialize)]
pub struct PromptTrace {
    pub file_name: String,
    pub session_id: String,
    pub turn: usize,
    pub rendered: String,
    pub probe_fact: Option<usize>,
    pub post_erasure: bool,
}

#[derive(Debug)]
pub struct EvalRun {
    pub report: MetricsReport,
    pub traces: Vec<PromptTrace>,
}

/// Replays the corpus through a fresh stack and computes the metrics.
pub fn run_suite(corpus: &SyntheticCorpus, config: &EvalConfig) -> Result<EvalRun> {
    run_suite_on(corpus, config, &MockBackend)
}

/// `run_suite` with an explicit backend (the silent mock strips echo
/// signal; a remote backend exercises a live endpoint).
pub fn run_suite_on(
    corpus: &SyntheticCorpus,
    config: &EvalConfig,
    backend: &dyn GenerationBackend,
) -> Result<EvalRun> {
    config.budget.validate()?;
    let clock = FakeClock::at(0);
    let clock_arc: Arc<dyn Clock> = Arc::new(clock.clone());
    let storage: Arc<dyn StorageBackend> = match &config.file_store {
        Some(path) => Arc::new(crate::persist::backend::FileBackend::open(path)?),
        None => Arc::new(MemoryBackend::new()),
    };
    let records = Arc::new(RecordStore::new(
        storage,
        Keyring::generate("kek-eval"),
        AuditLog::ephemeral(),
        clock_arc.clone(),
    ));
    let longterm = Arc::new(LongTermStore::new(records.clone(), clock_arc.clone()));
    let controller = MemoryController::new(
        Arc::new(ConversationStore::new(records.clone())),
        longterm.clone(),
        Arc::new(EpisodicStore::new(records, clock_arc.clone())),
        Arc::new(ContextRegistry::new()),
        Arc::new(WorkingMemory::default()),
        clock_arc,
        ControllerConfig {
            budget: config.budget.clone(),
            ..ControllerConfig::default()
        },
    );

    if let Some(dir) = &config.trace_dir {
        std::fs::create_dir_all(dir)?;
    }

    let user = corpus.user_id.as_str();
    let mut probes: Vec<ProbeOutcome> = Vec::new();
    let mut leaks: Vec<LeakHit> = Vec::new();
    let mut traces: Vec<PromptTrace> = Vec::new();
    let mut latencies_ms: Vec<f64> = Vec::new();
    let mut erased_values: Vec<(usize, String)> = Vec::new();
    let mut assemblies = 0usize;
    let mut post_erasure_assemblies = 0usize;
    let mut reminders_delivered = 0usize;

    for (session_index, session) in corpus.sessions.iter().enumerate() {
        let session_start = session.start_ms();
        clock.set(session_start);

        // Erasures scheduled for this session run before any turn.
        for erasure in corpus
            .erasures
            .iter()
            .filter(|e| e.erase_at_session == session_index)
        {
            let fact = &corpus.facts[erasure.fact_index];
            erase_fact(&longterm, user, &fact.attr_key, &fact.value)?;
            erased_values.push((erasure.fact_index, fact.value.clone()));
        }

        // Events scheduled during this session are added up front.
        for event in corpus
            .events
            .iter()
            .filter(|e| e.schedule_at_session == session_index)
        {
            controller
                .episodic
                .add_event(user, event.fire_at_ms, &event.payload)?;
        }

        let mut transcript: Vec<Message> = Vec::new();
        for (turn_index, turn) in session.turns.iter().enumerate() {
            clock.advance(corpus::TURN_SPACING_MS);
            let now = clock.now_ms();
            let injected = controller.proactive_tick(user, now)?;
            reminders_delivered += injected.len();

            let (query, probe_fact) = match turn {
                ScriptedTurn::Filler { text } => (text.clone(), None),
                ScriptedTurn::Fact { fact_index } => {
                    (corpus.facts[*fact_index].sentence.clone(), None)
                }
                ScriptedTurn::Probe { fact_index } => (
                    corpus.facts[*fact_index].probe_query.clone(),
                    Some(*fact_index),
                ),
            };

            // Latency measures memory retrieval and prompt integration
            // only; the backend call below is deliberately outside.
            let started = Instant::now();
            let assembly = controller.assemble_prompt(
                user,
                &session.session_id,
                &query,
                now,
                &config.policy,
                &config.budget,
            )?;
            latencies_ms.push(started.elapsed().as_secs_f64() * 1000.0);
            assemblies += 1;

            let rendered = assembly.rendered();
            let response = backend.generate(&to_chat_messages(&assembly), 0)?;

            let post_erasure = !erased_values.is_empty();
            if post_erasure {
                post_erasure_assemblies += 1;
                for (_, value) in &erased_values {
                    if rendered.contains(value) || response.contains(value) {
                        leaks.push(LeakHit {
                            session_id: session.session_id.clone(),
                            turn: turn_index,
                            value: value.clone(),
                        });
                    }
                }
            }

            if let Some(fact_index) = probe_fact {
                let fact = &corpus.facts[fact_index];
                let fact_erased = erased_values.iter().any(|(i, _)| *i == fact_index);
                probes.push(ProbeOutcome {
                    fact_index,
                    session_id: session.session_id.clone(),
                    turn: turn_index,
                    value: fact.value.clone(),
                    prompt_hit: rendered.contains(&fact.value),
                    response_hit: response.contains(&fact.value),
                    post_erasure: fact_erased,
                });
            }

            let file_name = format!("{}-{turn_index:03}.txt", session.session_id);
            if let Some(dir) = &config.trace_dir {
                std::fs::write(dir.join(&file_name), &rendered)?;
            }
            traces.push(PromptTrace {
                file_name,
                session_id: session.session_id.clone(),
                turn: turn_index,
                rendered,
                probe_fact,
                post_erasure,
            });

            let user_msg = Message::new(&session.session_id, Role::User, &query, now);
            controller.conv.remember(user_msg.clone())?;
            transcript.push(user_msg);
            let assistant_msg =
                Message::new(&session.session_id, Role::Assistant, &response, now + 1_000);
            controller.conv.remember(assistant_msg.clone())?;
            transcript.push(assistant_msg);

            if let Some(topic) = top_tf_word(&query) {
                controller.episodic.log_interaction(user, now, &topic)?;
            }
        }

        // Bio refresh is asynchronous but awaited between sessions so the
        // replay stays deterministic.
        let job = longterm.schedule_bio_refresh(user, transcript);
        job.join()?;
    }

    let live_probes: Vec<&ProbeOutcome> = probes.iter().filter(|p| !p.post_erasure).collect();
    let retrieval_accuracy = if live_probes.is_empty() {
        None
    } else {
        Some(live_probes.iter().filter(|p| p.prompt_hit).count() as f64 / live_probes.len() as f64)
    };
    let response_accuracy = if live_probes.is_empty() {
        None
    } else {
        Some(
            live_probes.iter().filter(|p| p.response_hit).count() as f64 / live_probes.len() as f64,
        )
    };
    let leakage_rate = if erased_values.is_empty() {
        None
    } else if post_erasure_assemblies == 0 {
        Some(0.0)
    } else {
        Some(leaks.len() as f64 / post_erasure_assemblies as f64)
    };

    let report = MetricsReport {
        retrieval_accuracy,
        response_accuracy,
        leakage_rate,
        assembly_latency_p50_ms: percentile(&mut latencies_ms.clone(), 0.50),
        assembly_latency_p95_ms: percentile(&mut latencies_ms.clone(), 0.95),
        hot_path_refresh_calls: longterm.sync_refresh_count(),
        assemblies,
        post_erasure_assemblies,
        probes,
        leaks,
        reminders_delivered,
        config: ConfigEcho {
            seed: corpus.seed,
            sessions: corpus.sessions.len(),
            facts: corpus.facts.len(),
            erasures: corpus.erasures.len(),
            events: corpus.events.len(),
            budget_total: config.budget.total,
            policy: config.policy.name,
            backend: backend.name().to_string(),
        },
    };
    Ok(EvalRun { report, traces })
}

/// Per-fact erasure, composed from the public surface: crypto-shred the
/// extracted trait, then rewrite the bio without any sentence carrying the
/// value.
pub fn erase_fact(
    longterm: &LongTermStore,
    user_id: &str,
    attr_key: &str,
    value: &str,
) -> Result<()> {
    longterm.forget(user_id, &EraseSelector::Trait(attr_key.to_string()))?;
    if let Some(bio) = longterm.get_bio(user_id)? {
        let cleaned = sentences(&bio.text)
            .map(|s| s.trim())
            .filter(|s| !s.contains(value))
            .collect::<Vec<_>>()
            .join(" ");
        if cleaned != bio.text {
            longterm.upsert_bio(user_id, &cleaned, BioSource::Inferred)?;
        }
    }
    Ok(())
}

fn percentile(samples: &mut [f64], q: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.sort_by(|a, b| a.total_cmp(b));
    let idx = ((samples.len() as f64 - 1.0) * q).round() as usize;
    samples[idx]
}

/// Latency stress: replays the corpus sessions concurrently over one
/// shared stack via rayon. Accuracy bookkeeping is skipped; only assembly
/// latencies come back. Not part of acceptance, which runs sequentially.
#[cfg(feature = "parallel")]
pub fn run_latency_stress(corpus: &SyntheticCorpus, config: &EvalConfig) -> Result<Vec<f64>> {
    use rayon::prelude::*;

    config.budget.validate()?;
    let clock = FakeClock::at(corpus.sessions.first().map(|s| s.start_ms()).unwrap_or(0));
    let clock_arc: Arc<dyn Clock> = Arc::new(clock.clone());
    let records = Arc::new(RecordStore::new(
        Arc::new(MemoryBackend::new()),
        Keyring::generate("kek-eval"),
        AuditLog::ephemeral(),
        clock_arc.clone(),
    ));
    let longterm = Arc::new(LongTermStore::new(records.clone(), clock_arc.clone()));
    let controller = MemoryController::new(
        Arc::new(ConversationStore::new(records.clone())),
        longterm,
        Arc::new(EpisodicStore::new(records, clock_arc.clone())),
        Arc::new(ContextRegistry::new()),
        Arc::new(WorkingMemory::default()),
        clock_arc,
        ControllerConfig {
            budget: config.budget.clone(),
            ..ControllerConfig::default()
        },
    );

    let latencies: Vec<f64> = corpus
        .sessions
        .par_iter()
        .flat_map_iter(|session| {
            let mut local = Vec::with_capacity(session.turns.len());
            for turn in &session.turns {
                let query = match turn {
                    ScriptedTurn::Filler { text } => text.clone(),
                    ScriptedTurn::Fact { fact_index } => {
                        corpus.facts[*fact_index].sentence.clone()
                    }
                    ScriptedTurn::Probe { fact_index } => {
                        corpus.facts[*fact_index].probe_query.clone()
                    }
                };
                let started = Instant::now();
                let assembly = controller.assemble_prompt(
                    &corpus.user_id,
                    &session.session_id,
                    &query,
                    session.start_ms(),
                    &config.policy,
                    &config.budget,
                );
                local.push(started.elapsed().as_secs_f64() * 1000.0);
                if let Ok(assembly) = assembly {
                    let _ = controller.conv.remember(Message::new(
                        &session.session_id,
                        Role::User,
                        &query,
                        session.start_ms(),
                    ));
                    std::hint::black_box(assembly.total_tokens);
                }
            }
            local
        })
        .collect();
    Ok(latencies)
}
