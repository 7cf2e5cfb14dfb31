//! Long-term user memory: encrypted bios, traits with consent, forgetting.
//!
//! Bios and traits persist under the `bio` and `trait` namespaces. Bio
//! regeneration is asynchronous: the hot path only ever reads a cached,
//! previously committed version, and a counter proves no refresher run ever
//! happens synchronously during reads. Forgetting crypto-shreds the
//! matching records and drops the cache so nothing erased can resurface.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{MemoryError, Result};
use crate::model::{count_tokens, Message, Role};
use crate::persist::audit::{AuditAction, AuditEntry};
use crate::persist::{RecordKey, RecordStore};

pub const BIO_NAMESPACE: &str = "bio";
pub const TRAIT_NAMESPACE: &str = "trait";
/// Bio text cap, in tokens.
pub const BIO_MAX_TOKENS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BioSource {
    UserStated,
    Inferred,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserBio {
    pub user_id: String,
    pub text: String,
    pub version: u64,
    pub updated_ms: i64,
    pub source: BioSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consent {
    Granted,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraitEntry {
    pub user_id: String,
    pub key: String,
    pub value: String,
    pub consent: Consent,
    pub updated_ms: i64,
}

/// What to forget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EraseSelector {
    All,
    Bio,
    Trait(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ErasureReport {
    pub bio_erased: bool,
    pub traits_erased: Vec<String>,
}

/// Complete decrypted view for the owning user: bio, every trait including
/// revoked ones, and the audit trail.
#[derive(Debug, Clone, Serialize)]
pub struct Inspection {
    pub user_id: String,
    pub bio: Option<UserBio>,
    pub traits: Vec<TraitEntry>,
    pub audit: Vec<AuditEntry>,
}

// ---------------------------------------------------------------------------
// Bio refresher
// ---------------------------------------------------------------------------

/// Output of one refresher run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RefreshOutcome {
    pub bio_text: String,
    /// Structured self-statements worth keeping as traits: (key, value).
    pub traits: Vec<(String, String)>,
}

/// Derives an updated bio from the current one plus a recent transcript.
/// The default is rule-based and deterministic; a generation-backed
/// refresher can implement the same interface.
pub trait BioRefresher: Send + Sync {
    fn refresh(&self, current_bio: &str, transcript: &[Message]) -> Result<RefreshOutcome>;
}

/// Extracts first-person self-statements ("my name is Ada", "I like
/// hiking") from user turns and appends the new ones to the bio,
/// deduplicated case-insensitively. "my <attr> is <value>" statements are
/// also surfaced as structured traits.
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleBasedRefresher;

impl BioRefresher for RuleBasedRefresher {
    fn refresh(&self, current_bio: &str, transcript: &[Message]) -> Result<RefreshOutcome> {
        let mut seen: HashSet<String> = sentences(current_bio)
            .map(|s| normalize_sentence(s))
            .collect();
        let mut bio_text = current_bio.trim().to_string();
        let mut traits = Vec::new();

        for turn in transcript.iter().filter(|m| m.role == Role::User) {
            for sentence in sentences(&turn.content) {
                let trimmed = sentence.trim();
                if !is_self_statement(trimmed) {
                    continue;
                }
                if let Some((key, value)) = parse_attr_value(trimmed) {
                    traits.push((key, value));
                }
                let norm = normalize_sentence(trimmed);
                if !seen.insert(norm) {
                    continue;
                }
                let mut addition = trimmed.to_string();
                if !addition.ends_with(['.', '!', '?']) {
                    addition.push('.');
                }
                let candidate = if bio_text.is_empty() {
                    addition.clone()
                } else {
                    format!("{bio_text} {addition}")
                };
                if count_tokens(&candidate) > BIO_MAX_TOKENS {
                    break;
                }
                bio_text = candidate;
            }
        }
        Ok(RefreshOutcome { bio_text, traits })
    }
}

/// Splits on sentence terminators, keeping the terminator with the sentence.
pub fn sentences(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        let trimmed = rest.trim_start();
        if trimmed.is_empty() {
            return None;
        }
        let end = trimmed
            .char_indices()
            .find(|(_, c)| matches!(c, '.' | '!' | '?'))
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(trimmed.len());
        let (sentence, tail) = trimmed.split_at(end);
        rest = tail;
        Some(sentence)
    })
}

fn is_self_statement(sentence: &str) -> bool {
    let lower = sentence.to_lowercase();
    (lower.starts_with("my ") && lower.contains(" is ")) || lower.starts_with("i like ")
}

/// "my favorite color is crimson." -> ("favorite_color", "crimson")
fn parse_attr_value(sentence: &str) -> Option<(String, String)> {
    let lower = sentence.to_lowercase();
    let body = lower.strip_prefix("my ")?;
    let (attr, value) = body.split_once(" is ")?;
    let attr = attr.trim().replace(char::is_whitespace, "_");
    let value = value.trim().trim_end_matches(['.', '!', '?']).trim().to_string();
    if attr.is_empty() || value.is_empty() {
        return None;
    }
    Some((attr, value))
}

fn normalize_sentence(sentence: &str) -> String {
    sentence
        .trim()
        .trim_end_matches(['.', '!', '?'])
        .to_lowercase()
}

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct CachedBio {
    bio: UserBio,
}

/// Handle to a background bio refresh.
pub struct RefreshJob {
    handle: JoinHandle<Result<bool>>,
}

impl RefreshJob {
    /// Waits for the refresh; true when the bio changed.
    pub fn join(self) -> Result<bool> {
        self.handle
            .join()
            .map_err(|_| MemoryError::Storage("bio refresh worker panicked".into()))?
    }
}

pub struct LongTermStore {
    records: Arc<RecordStore>,
    clock: Arc<dyn Clock>,
    refresher: Arc<dyn BioRefresher>,
    cache: Arc<RwLock<HashMap<String, CachedBio>>>,
    pending: Arc<Mutex<HashSet<String>>>,
    user_locks: Arc<Mutex<HashMap<String, Arc<Mutex<()>>>>>,
    /// Refresher runs executed on a caller's thread. The prompt hot path
    /// must keep this at zero.
    sync_refresh_calls: Arc<AtomicU64>,
    background_refresh_calls: Arc<AtomicU64>,
    /// Highest version handed out per user, so versions stay strictly
    /// increasing even across forget cycles in one process.
    last_versions: Arc<Mutex<HashMap<String, u64>>>,
}

impl LongTermStore {
    pub fn new(records: Arc<RecordStore>, clock: Arc<dyn Clock>) -> LongTermStore {
        LongTermStore {
            records,
            clock,
            refresher: Arc::new(RuleBasedRefresher),
            cache: Arc::new(RwLock::new(HashMap::new())),
            pending: Arc::new(Mutex::new(HashSet::new())),
            user_locks: Arc::new(Mutex::new(HashMap::new())),
            sync_refresh_calls: Arc::new(AtomicU64::new(0)),
            background_refresh_calls: Arc::new(AtomicU64::new(0)),
            last_versions: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    pub fn with_refresher(mut self, refresher: Arc<dyn BioRefresher>) -> LongTermStore {
        self.refresher = refresher;
        self
    }

    fn user_lock(&self, user_id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.user_locks.lock().unwrap();
        locks.entry(user_id.to_string()).or_default().clone()
    }

    fn bio_key(user_id: &str) -> RecordKey {
        RecordKey::new(BIO_NAMESPACE, user_id, "bio")
    }

    fn trait_key(user_id: &str, key: &str) -> RecordKey {
        RecordKey::new(TRAIT_NAMESPACE, user_id, key)
    }

    /// Stores a new bio version, encrypted, and updates the cache
    /// atomically.
    pub fn upsert_bio(&self, user_id: &str, text: &str, source: BioSource) -> Result<UserBio> {
        if count_tokens(text) > BIO_MAX_TOKENS {
            return Err(MemoryError::InvalidInput(format!(
                "bio text exceeds {BIO_MAX_TOKENS} tokens"
            )));
        }
        let lock = self.user_lock(user_id);
        let _held = lock.lock().unwrap();

        let prev_version = self.load_bio(user_id)?.map(|b| b.version).unwrap_or(0);
        let floor = {
            let versions = self.last_versions.lock().unwrap();
            versions.get(user_id).copied().unwrap_or(0)
        };
        let bio = UserBio {
            user_id: user_id.to_string(),
            text: text.to_string(),
            version: prev_version.max(floor) + 1,
            updated_ms: self.clock.now_ms(),
            source,
        };
        self.records
            .put(&Self::bio_key(user_id), serde_json::to_vec(&bio)?.as_slice())?;
        self.last_versions
            .lock()
            .unwrap()
            .insert(user_id.to_string(), bio.version);
        self.cache
            .write()
            .unwrap()
            .insert(user_id.to_string(), CachedBio { bio: bio.clone() });
        Ok(bio)
    }

    fn load_bio(&self, user_id: &str) -> Result<Option<UserBio>> {
        match self.records.get(&Self::bio_key(user_id)) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(MemoryError::NotFound { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Decrypted current bio, bypassing the cache.
    pub fn get_bio(&self, user_id: &str) -> Result<Option<UserBio>> {
        self.load_bio(user_id)
    }

    /// Cached bio for prompt assembly. Returns immediately: a cache miss
    /// falls back to one decrypting read, and no code path here can invoke
    /// the refresher.
    pub fn get_cached_bio(&self, user_id: &str) -> Result<Option<UserBio>> {
        if let Some(entry) = self.cache.read().unwrap().get(user_id) {
            return Ok(Some(entry.bio.clone()));
        }
        match self.load_bio(user_id)? {
            Some(bio) => {
                self.cache
                    .write()
                    .unwrap()
                    .entry(user_id.to_string())
                    .or_insert_with(|| CachedBio { bio: bio.clone() });
                Ok(Some(bio))
            }
            None => Ok(None),
        }
    }

    pub fn set_trait(
        &self,
        user_id: &str,
        key: &str,
        value: &str,
        consent: Consent,
    ) -> Result<TraitEntry> {
        if key.trim().is_empty() {
            return Err(MemoryError::InvalidInput("trait key must be non-empty".into()));
        }
        let lock = self.user_lock(user_id);
        let _held = lock.lock().unwrap();
        let entry = TraitEntry {
            user_id: user_id.to_string(),
            key: key.to_string(),
            value: value.to_string(),
            consent,
            updated_ms: self.clock.now_ms(),
        };
        self.records.put(
            &Self::trait_key(user_id, key),
            serde_json::to_vec(&entry)?.as_slice(),
        )?;
        Ok(entry)
    }

    fn load_traits(&self, user_id: &str) -> Result<Vec<TraitEntry>> {
        let mut out = Vec::new();
        for key in self.records.list(TRAIT_NAMESPACE, user_id)? {
            let bytes = self.records.get(&key)?;
            out.push(serde_json::from_slice::<TraitEntry>(&bytes)?);
        }
        out.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(out)
    }

    /// Only consented traits, sorted by key. Revoked traits never reach
    /// retrieval or prompts.
    pub fn get_traits(&self, user_id: &str) -> Result<Vec<TraitEntry>> {
        Ok(self
            .load_traits(user_id)?
            .into_iter()
            .filter(|t| t.consent == Consent::Granted)
            .collect())
    }

    /// Everything the system holds about the user, revoked traits
    /// included. The read is itself audited.
    pub fn inspect(&self, user_id: &str) -> Result<Inspection> {
        let bio = self.load_bio(user_id)?;
        let traits = self.load_traits(user_id)?;
        self.records.audit().append(
            self.clock.now_ms(),
            BIO_NAMESPACE,
            user_id,
            "*",
            AuditAction::Inspect,
        )?;
        Ok(Inspection {
            user_id: user_id.to_string(),
            bio,
            traits,
            audit: self.records.audit().entries_for_user(user_id),
        })
    }

    /// Crypto-shreds the selected records and drops the cache entry, so
    /// later assemblies can never see erased content. Idempotent.
    pub fn forget(&self, user_id: &str, selector: &EraseSelector) -> Result<ErasureReport> {
        let lock = self.user_lock(user_id);
        let _held = lock.lock().unwrap();
        let mut report = ErasureReport::default();
        match selector {
            EraseSelector::Bio => {
                report.bio_erased = self.records.erase(&Self::bio_key(user_id))?;
                self.cache.write().unwrap().remove(user_id);
            }
            EraseSelector::Trait(key) => {
                if self.records.erase(&Self::trait_key(user_id, key))? {
                    report.traits_erased.push(key.clone());
                }
            }
            EraseSelector::All => {
                report.bio_erased = self.records.erase(&Self::bio_key(user_id))?;
                for key in self.records.list(TRAIT_NAMESPACE, user_id)? {
                    if self.records.erase(&key)? {
                        report.traits_erased.push(key.record_id.clone());
                    }
                }
                self.cache.write().unwrap().remove(user_id);
            }
        }
        Ok(report)
    }

    /// Runs the refresher over a transcript in a background thread and
    /// publishes the new bio (and any extracted traits) atomically on
    /// completion. The previous cached version stays visible, and intact on
    /// failure, throughout.
    pub fn schedule_bio_refresh(&self, user_id: &str, transcript: Vec<Message>) -> RefreshJob {
        self.pending.lock().unwrap().insert(user_id.to_string());
        let worker = self.clone_for_worker();
        let user = user_id.to_string();
        let handle = std::thread::spawn(move || {
            let result = worker.run_refresh(&user, &transcript, false);
            worker.pending.lock().unwrap().remove(&user);
            result
        });
        RefreshJob { handle }
    }

    /// Synchronous refresh, metered by the hot-path counter. Nothing on
    /// the assembly path calls this; it exists for explicit operator use
    /// and for proving the counter works.
    pub fn refresh_now(&self, user_id: &str, transcript: &[Message]) -> Result<bool> {
        self.run_refresh(user_id, transcript, true)
    }

    fn run_refresh(&self, user_id: &str, transcript: &[Message], sync: bool) -> Result<bool> {
        if sync {
            self.sync_refresh_calls.fetch_add(1, Ordering::SeqCst);
        } else {
            self.background_refresh_calls.fetch_add(1, Ordering::SeqCst);
        }
        let current = self.load_bio(user_id)?;
        let current_text = current.as_ref().map(|b| b.text.as_str()).unwrap_or("");
        let outcome = self.refresher.refresh(current_text, transcript)?;

        for (key, value) in &outcome.traits {
            let existing = self
                .load_traits(user_id)?
                .into_iter()
                .find(|t| &t.key == key);
            let unchanged = existing
                .as_ref()
                .map(|t| &t.value == value)
                .unwrap_or(false);
            // Never resurrect a revoked trait from inference.
            let revoked = existing
                .as_ref()
                .map(|t| t.consent == Consent::Revoked)
                .unwrap_or(false);
            if !unchanged && !revoked {
                self.set_trait(user_id, key, value, Consent::Granted)?;
            }
        }

        let changed = outcome.bio_text.trim() != current_text.trim();
        if changed && !outcome.bio_text.trim().is_empty() {
            self.upsert_bio(user_id, outcome.bio_text.trim(), BioSource::Inferred)?;
        }
        Ok(changed)
    }

    fn clone_for_worker(&self) -> LongTermStore {
        LongTermStore {
            records: self.records.clone(),
            clock: self.clock.clone(),
            refresher: self.refresher.clone(),
            cache: self.cache.clone(),
            pending: self.pending.clone(),
            user_locks: self.user_locks.clone(),
            sync_refresh_calls: self.sync_refresh_calls.clone(),
            background_refresh_calls: self.background_refresh_calls.clone(),
            last_versions: self.last_versions.clone(),
        }
    }

    pub fn refresh_pending(&self, user_id: &str) -> bool {
        self.pending.lock().unwrap().contains(user_id)
    }

    /// Refresher runs executed synchronously on a caller's thread.
    pub fn sync_refresh_count(&self) -> u64 {
        self.sync_refresh_calls.load(Ordering::SeqCst)
    }

    pub fn background_refresh_count(&self) -> u64 {
        self.background_refresh_calls.load(Ordering::SeqCst)
    }

    pub fn records(&self) -> &Arc<RecordStore> {
        &self.records
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FakeClock;
    use crate::persist::audit::AuditLog;
    use crate::persist::backend::MemoryBackend;
    use crate::persist::contains_any_window;
    use crate::persist::keyring::Keyring;

    fn store() -> LongTermStore {
        let records = Arc::new(RecordStore::new(
            Arc::new(MemoryBackend::new()),
            Keyring::generate("kek-1"),
            AuditLog::ephemeral(),
            Arc::new(FakeClock::at(1_000)),
        ));
        LongTermStore::new(records, Arc::new(FakeClock::at(1_000)))
    }

    #[test]
    fn bio_versions_increase_monotonically() {
        let s = store();
        let v1 = s.upsert_bio("u1", "I teach piano.", BioSource::UserStated).unwrap();
        assert_eq!(v1.version, 1);
        let v2 = s.upsert_bio("u1", "I teach piano. I live in Rome.", BioSource::UserStated).unwrap();
        assert_eq!(v2.version, 2);
        assert_eq!(s.get_bio("u1").unwrap().unwrap().text, v2.text);
        // Forgetting and re-creating keeps versions strictly increasing.
        s.forget("u1", &EraseSelector::Bio).unwrap();
        let v3 = s.upsert_bio("u1", "fresh start", BioSource::UserStated).unwrap();
        assert!(v3.version > v2.version);
    }

    #[test]
    fn oversize_bio_is_rejected() {
        let s = store();
        let huge = "x".repeat((BIO_MAX_TOKENS + 1) * 4);
        assert!(s.upsert_bio("u1", &huge, BioSource::UserStated).is_err());
    }

    #[test]
    fn traits_upsert_and_consent_gate() {
        let s = store();
        s.set_trait("u1", "diet", "vegetarian", Consent::Granted).unwrap();
        let visible = s.get_traits("u1").unwrap();
        assert_eq!(visible.len(), 1);
        assert_eq!(visible[0].value, "vegetarian");

        // Revocation hides from retrieval but not from inspect.
        s.set_trait("u1", "diet", "vegetarian", Consent::Revoked).unwrap();
        assert!(s.get_traits("u1").unwrap().is_empty());
        let inspection = s.inspect("u1").unwrap();
        assert_eq!(inspection.traits.len(), 1);
        assert_eq!(inspection.traits[0].consent, Consent::Revoked);

        // Upsert per key: last value wins, single entry.
        s.set_trait("u1", "diet", "vegan", Consent::Granted).unwrap();
        let visible = s.get_traits("u1").unwrap();
        assert_eq!(visible.len(), 1);
        assert_eq!(visible[0].value, "vegan");
    }

    #[test]
    fn traits_sorted_by_key() {
        let s = store();
        s.set_trait("u1", "tone", "casual", Consent::Granted).unwrap();
        s.set_trait("u1", "diet", "vegan", Consent::Granted).unwrap();
        let keys: Vec<String> = s.get_traits("u1").unwrap().into_iter().map(|t| t.key).collect();
        assert_eq!(keys, vec!["diet", "tone"]);
    }

    #[test]
    fn empty_key_rejected() {
        let s = store();
        assert!(s.set_trait("u1", "  ", "x", Consent::Granted).is_err());
    }

    #[test]
    fn inspect_lists_everything_and_forget_all_empties_it() {
        let s = store();
        s.upsert_bio("u1", "I paint.", BioSource::UserStated).unwrap();
        s.set_trait("u1", "diet", "vegan", Consent::Granted).unwrap();
        s.set_trait("u1", "tone", "formal", Consent::Revoked).unwrap();
        let inspection = s.inspect("u1").unwrap();
        assert!(inspection.bio.is_some());
        assert_eq!(inspection.traits.len(), 2);

        let report = s.forget("u1", &EraseSelector::All).unwrap();
        assert!(report.bio_erased);
        assert_eq!(report.traits_erased.len(), 2);

        let inspection = s.inspect("u1").unwrap();
        assert!(inspection.bio.is_none());
        assert!(inspection.traits.is_empty());
        assert!(inspection
            .audit
            .iter()
            .any(|e| e.action == AuditAction::Erase));

        // Idempotent.
        let again = s.forget("u1", &EraseSelector::All).unwrap();
        assert!(!again.bio_erased);
        assert!(again.traits_erased.is_empty());
    }

    #[test]
    fn selective_forget_keeps_the_rest() {
        let s = store();
        s.upsert_bio("u1", "I hike.", BioSource::UserStated).unwrap();
        s.set_trait("u1", "diet", "vegan", Consent::Granted).unwrap();
        s.set_trait("u1", "tone", "casual", Consent::Granted).unwrap();
        s.forget("u1", &EraseSelector::Trait("diet".into())).unwrap();
        let keys: Vec<String> = s.get_traits("u1").unwrap().into_iter().map(|t| t.key).collect();
        assert_eq!(keys, vec!["tone"]);
        assert!(s.get_bio("u1").unwrap().is_some());
    }

    #[test]
    fn unknown_user_inspection_is_empty() {
        let s = store();
        let inspection = s.inspect("ghost").unwrap();
        assert!(inspection.bio.is_none());
        assert!(inspection.traits.is_empty());
    }

    #[test]
    fn refresher_extracts_and_deduplicates() {
        let s = store();
        let transcript = vec![
            Message::new("s1", Role::User, "my name is Ada. I like hiking.", 1),
            Message::new("s1", Role::Assistant, "Nice to meet you, Ada!", 2),
        ];
        let job = s.schedule_bio_refresh("u1", transcript.clone());
        assert!(job.join().unwrap());
        let bio = s.get_bio("u1").unwrap().unwrap();
        assert!(bio.text.contains("my name is Ada."));
        assert!(bio.text.contains("I like hiking."));
        assert_eq!(bio.text.matches("my name is Ada").count(), 1);

        // Identical transcript again: no change, no new version.
        let v = bio.version;
        let job = s.schedule_bio_refresh("u1", transcript);
        assert!(!job.join().unwrap());
        assert_eq!(s.get_bio("u1").unwrap().unwrap().version, v);

        // Structured statement became a consented trait.
        let traits = s.get_traits("u1").unwrap();
        assert!(traits.iter().any(|t| t.key == "name" && t.value == "ada"));
    }

    #[test]
    fn cached_reads_never_run_the_refresher() {
        let s = store();
        s.upsert_bio("u1", "I fence.", BioSource::UserStated).unwrap();
        for _ in 0..50 {
            let bio = s.get_cached_bio("u1").unwrap().unwrap();
            assert_eq!(bio.text, "I fence.");
        }
        assert!(s.get_cached_bio("ghost").unwrap().is_none());
        assert_eq!(s.sync_refresh_count(), 0);

        // The counter does fire for the explicit synchronous path.
        s.refresh_now("u1", &[Message::new("s", Role::User, "I like chess.", 1)])
            .unwrap();
        assert_eq!(s.sync_refresh_count(), 1);
    }

    #[test]
    fn pending_refresh_leaves_previous_version_visible() {
        struct SlowRefresher {
            release: Arc<std::sync::atomic::AtomicBool>,
        }
        impl BioRefresher for SlowRefresher {
            fn refresh(&self, current: &str, _t: &[Message]) -> Result<RefreshOutcome> {
                while !self.release.load(Ordering::SeqCst) {
                    std::thread::yield_now();
                }
                Ok(RefreshOutcome {
                    bio_text: format!("{current} updated."),
                    traits: vec![],
                })
            }
        }
        let release = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let s = store().with_refresher(Arc::new(SlowRefresher {
            release: release.clone(),
        }));
        s.upsert_bio("u1", "Original.", BioSource::UserStated).unwrap();

        let job = s.schedule_bio_refresh("u1", vec![]);
        assert!(s.refresh_pending("u1"));
        // Read while the refresh is stalled: previous committed version.
        assert_eq!(s.get_cached_bio("u1").unwrap().unwrap().text, "Original.");
        assert_eq!(s.sync_refresh_count(), 0);

        release.store(true, Ordering::SeqCst);
        assert!(job.join().unwrap());
        assert!(!s.refresh_pending("u1"));
        assert_eq!(
            s.get_cached_bio("u1").unwrap().unwrap().text,
            "Original. updated."
        );
    }

    #[test]
    fn failed_refresh_keeps_previous_bio() {
        struct FailingRefresher;
        impl BioRefresher for FailingRefresher {
            fn refresh(&self, _c: &str, _t: &[Message]) -> Result<RefreshOutcome> {
                Err(MemoryError::backend("model unavailable"))
            }
        }
        let s = store().with_refresher(Arc::new(FailingRefresher));
        s.upsert_bio("u1", "Stable.", BioSource::UserStated).unwrap();
        let job = s.schedule_bio_refresh("u1", vec![]);
        assert!(job.join().is_err());
        assert_eq!(s.get_cached_bio("u1").unwrap().unwrap().text, "Stable.");
    }

    #[test]
    fn erased_bio_leaves_no_window_in_backing_store() {
        let records = Arc::new(RecordStore::new(
            Arc::new(MemoryBackend::new()),
            Keyring::generate("kek-1"),
            AuditLog::ephemeral(),
            Arc::new(FakeClock::at(0)),
        ));
        let s = LongTermStore::new(records.clone(), Arc::new(FakeClock::at(0)));
        let secret = "my passport number is QX123456789 and I keep it secret";
        s.upsert_bio("u1", secret, BioSource::UserStated).unwrap();
        s.forget("u1", &EraseSelector::All).unwrap();
        let raw = records.backend().raw_dump().unwrap();
        assert!(!contains_any_window(&raw, secret.as_bytes(), 16));
        assert!(s.get_cached_bio("u1").unwrap().is_none());
    }

    #[test]
    fn revoked_trait_not_resurrected_by_refresher() {
        let s = store();
        s.set_trait("u1", "diet", "vegan", Consent::Revoked).unwrap();
        let job = s.schedule_bio_refresh(
            "u1",
            vec![Message::new("s", Role::User, "my diet is vegan.", 1)],
        );
        job.join().unwrap();
        assert!(s.get_traits("u1").unwrap().is_empty());
    }
}
