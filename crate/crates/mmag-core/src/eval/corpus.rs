//! Synthetic multi-session corpora with planted facts, erasures, events.
//!
//! Everything derives from the seed: two calls with the same parameters
//! produce byte-identical corpora. Facts are templated self-statements
//! ("my <attr> is <value>"), probes land at least one simulated day after
//! planting and share at least two content words with their fact without
//! ever containing the value itself.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{MS_PER_DAY, MS_PER_HOUR};
use crate::error::{MemoryError, Result};

/// First simulated session day (days since epoch); later sessions follow
/// one per day.
pub const BASE_DAY: i64 = 100;
/// Sessions start at 09:00 simulated time.
pub const SESSION_START_HOUR: i64 = 9;
/// Spacing between turns within a session.
pub const TURN_SPACING_MS: i64 = 60_000;

const ATTR_ADJECTIVES: [&str; 12] = [
    "favorite", "childhood", "preferred", "usual", "secret", "weekly", "morning", "evening",
    "summer", "winter", "office", "travel",
];
const ATTR_NOUNS: [&str; 12] = [
    "color", "city", "dish", "song", "teacher", "route", "drink", "number", "plant", "book",
    "market", "stadium",
];
const VALUE_WORDS: [&str; 16] = [
    "crimson", "oslo", "risotto", "nocturne", "meridian", "cypress", "saffron", "granite",
    "lagoon", "ember", "juniper", "cobalt", "marzipan", "sierra", "tundra", "velvet",
];
const FILLERS: [&str; 8] = [
    "let us practice a short conversation",
    "how would you greet a colleague politely",
    "please correct the grammar of that last phrase",
    "could you suggest a topic for tomorrow",
    "that explanation made sense, thank you",
    "can we review what we covered briefly",
    "give me another example sentence to study",
    "what would be a harder variation of this exercise",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedFact {
    /// Trait key form of the attribute ("favorite_color").
    pub attr_key: String,
    /// The full planted sentence ("my favorite color is crimson742.").
    pub sentence: String,
    /// The distinctive value the scans look for.
    pub value: String,
    pub planted_session: usize,
    pub probe_session: usize,
    /// Shares >= 2 content words with the fact, never the value.
    pub probe_query: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Erasure {
    pub fact_index: usize,
    /// Erasure runs at the start of this session.
    pub erase_at_session: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSpec {
    /// Event is added while replaying this session.
    pub schedule_at_session: usize,
    pub fire_at_ms: i64,
    pub payload: String,
}

/// One scripted user turn. Assistant replies come from the backend during
/// replay, not from the script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScriptedTurn {
    Filler { text: String },
    Fact { fact_index: usize },
    Probe { fact_index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionScript {
    pub session_id: String,
    /// Days since epoch for the simulated clock.
    pub day: i64,
    pub turns: Vec<ScriptedTurn>,
}

impl SessionScript {
    pub fn start_ms(&self) -> i64 {
        self.day * MS_PER_DAY + SESSION_START_HOUR * MS_PER_HOUR
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub user_id: String,
    pub sessions: Vec<SessionScript>,
    pub facts: Vec<PlantedFact>,
    pub erasures: Vec<Erasure>,
    pub events: Vec<EventSpec>,
}

impl SyntheticCorpus {
    /// Facts erased at or before a given session index.
    pub fn erased_by_session(&self, session: usize) -> Vec<usize> {
        self.erasures
            .iter()
            .filter(|e| e.erase_at_session <= session)
            .map(|e| e.fact_index)
            .collect()
    }
}

/// Builds a corpus deterministically from the seed.
pub fn generate_corpus(
    seed: u64,
    n_sessions: usize,
    n_facts: usize,
    n_erasures: usize,
    n_events: usize,
) -> Result<SyntheticCorpus> {
    if n_sessions == 0 {
        return Err(MemoryError::InvalidInput("need at least one session".into()));
    }
    if n_facts > 0 && n_sessions < 2 {
        return Err(MemoryError::InvalidInput(
            "facts need probes at least one day later: use >= 2 sessions".into(),
        ));
    }
    if n_erasures > n_facts {
        return Err(MemoryError::InvalidInput(format!(
            "n_erasures {n_erasures} exceeds n_facts {n_facts}"
        )));
    }
    if n_events > 0 && n_sessions < 2 {
        return Err(MemoryError::InvalidInput(
            "events fire in a later session: use >= 2 sessions".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Distinct attributes, so every fact maps to its own trait key.
    let mut attr_pool: Vec<(usize, usize)> = (0..ATTR_ADJECTIVES.len())
        .flat_map(|a| (0..ATTR_NOUNS.len()).map(move |n| (a, n)))
        .collect();
    attr_pool.shuffle(&mut rng);
    if n_facts > attr_pool.len() {
        return Err(MemoryError::InvalidInput(format!(
            "at most {} facts supported",
            attr_pool.len()
        )));
    }

    let mut facts = Vec::with_capacity(n_facts);
    for (adj_idx, noun_idx) in attr_pool.into_iter().take(n_facts) {
        let adjective = ATTR_ADJECTIVES[adj_idx];
        let noun = ATTR_NOUNS[noun_idx];
        let value = format!(
            "{}{:03}",
            VALUE_WORDS[rng.gen_range(0..VALUE_WORDS.len())],
            rng.gen_range(0..1000)
        );
        let planted_session = rng.gen_range(0..n_sessions - 1);
        let probe_session = rng.gen_range(planted_session + 1..n_sessions);
        facts.push(PlantedFact {
            attr_key: format!("{adjective}_{noun}"),
            sentence: format!("my {adjective} {noun} is {value}."),
            value,
            planted_session,
            probe_session,
            probe_query: format!("what is my {adjective} {noun}?"),
        });
    }

    // Erasures pick distinct facts and run strictly after planting.
    let mut erase_candidates: Vec<usize> = (0..n_facts).collect();
    erase_candidates.shuffle(&mut rng);
    let erasures: Vec<Erasure> = erase_candidates
        .into_iter()
        .take(n_erasures)
        .map(|fact_index| {
            let planted = facts[fact_index].planted_session;
            let erase_at_session = rng.gen_range(planted + 1..n_sessions.max(planted + 2));
            Erasure {
                fact_index,
                erase_at_session,
            }
        })
        .collect();

    // Events schedule in one session and fire near the start of a later
    // one, inside the first proactive tick's lookahead.
    let mut events = Vec::with_capacity(n_events);
    for i in 0..n_events {
        let schedule_at_session = rng.gen_range(0..n_sessions - 1);
        let fire_session = rng.gen_range(schedule_at_session + 1..n_sessions);
        let fire_day = BASE_DAY + fire_session as i64;
        events.push(EventSpec {
            schedule_at_session,
            fire_at_ms: fire_day * MS_PER_DAY + SESSION_START_HOUR * MS_PER_HOUR + 5 * 60_000,
            payload: format!("scheduled check-in ev{i:02}"),
        });
    }

    // Session scripts: fillers, then facts planted in this session, then
    // probes for facts probed here, shuffled deterministically.
    let mut sessions = Vec::with_capacity(n_sessions);
    for s in 0..n_sessions {
        let mut turns: Vec<ScriptedTurn> = Vec::new();
        let filler_count = rng.gen_range(2..5);
        for _ in 0..filler_count {
            turns.push(ScriptedTurn::Filler {
                text: FILLERS[rng.gen_range(0..FILLERS.len())].to_string(),
            });
        }
        for (i, fact) in facts.iter().enumerate() {
            if fact.planted_session == s {
                turns.push(ScriptedTurn::Fact { fact_index: i });
            }
        }
        turns.shuffle(&mut rng);
        // Probes go last so the planted turn of the same day never sits
        // after its own probe.
        for (i, fact) in facts.iter().enumerate() {
            if fact.probe_session == s {
                turns.push(ScriptedTurn::Probe { fact_index: i });
            }
        }
        sessions.push(SessionScript {
            session_id: format!("sess-{s:03}"),
            day: BASE_DAY + s as i64,
            turns,
        });
    }

    Ok(SyntheticCorpus {
        seed,
        user_id: "eval-user".to_string(),
        sessions,
        facts,
        erasures,
        events,
    })
}
