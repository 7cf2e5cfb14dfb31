//! Layered memory orchestration for conversational agents.
//!
//! Five memory layers — conversational history, long-term user bios and
//! traits, episodic events and routines, context signals, and a per-session
//! working scratchpad — sit behind a central controller that scores and
//! prioritizes retrieved items, resolves conflicts between candidate
//! responses, and assembles token-budgeted prompts. Durable layers persist
//! through an envelope-encrypting record store with crypto-shredding
//! erasure; a deterministic harness replays synthetic corpora and reports
//! retrieval accuracy, leakage, and assembly latency.
//!
//! With the default `parallel` feature, batch scoring and the latency
//! stress mode fan out over rayon; disabling it falls back to the
//! sequential paths with identical results.

pub mod backend;
pub mod clock;
pub mod context;
pub mod controller;
pub mod conv;
pub mod episodic;
pub mod error;
pub mod eval;
pub mod longterm;
pub mod model;
pub mod persist;
pub mod working;

pub use backend::{ChatMessage, GenerationBackend, MockBackend, RemoteBackend, SilentBackend};
pub use clock::{Clock, FakeClock, SystemClock};
pub use controller::{
    ControllerConfig, MemoryController, Policy, PolicyName, PromptAssembly, PromptSegment,
    RetrievedItem,
};
pub use conv::{ConversationStore, PruneReport, RememberOutcome};
pub use episodic::{EpisodicStore, EventRecord, EventStatus, InteractionStamp, RoutineCue};
pub use error::{MemoryError, Result};
pub use eval::{generate_corpus, run_suite, EvalConfig, MetricsReport};
pub use longterm::{
    BioSource, Consent, EraseSelector, Inspection, LongTermStore, TraitEntry, UserBio,
};
pub use model::{
    count_tokens, validate_message, MalformedReason, MemorySource, Message, Role, TokenBudget,
    Validity,
};
pub use persist::{RecordKey, RecordStore};
pub use working::WorkingMemory;
