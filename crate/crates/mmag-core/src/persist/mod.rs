//! Encrypted record store shared by all durable memory layers.
//!
//! Every durable layer persists through [`RecordStore`]: plaintext is
//! compressed, sealed in an [`envelope::EnvelopeRecord`] under a fresh
//! per-record key, and written to a pluggable [`backend::StorageBackend`].
//! Erasure destroys the wrapped data key along with the envelope, so a
//! shredded record is unrecoverable even from retained backups of the
//! ciphertext.

pub mod audit;
pub mod backend;
pub mod envelope;
pub mod keyring;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::clock::Clock;
use crate::error::{MemoryError, Result};
use audit::{AuditAction, AuditLog};
use backend::StorageBackend;
use envelope::EnvelopeRecord;
use keyring::Keyring;

/// Address of one record: `(namespace, user_id, record_id)` is unique within
/// a store instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub namespace: String,
    pub user_id: String,
    pub record_id: String,
}

impl RecordKey {
    pub fn new(
        namespace: impl Into<String>,
        user_id: impl Into<String>,
        record_id: impl Into<String>,
    ) -> RecordKey {
        RecordKey {
            namespace: namespace.into(),
            user_id: user_id.into(),
            record_id: record_id.into(),
        }
    }

    /// Length-prefixed binary form used by file backends.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for part in [&self.namespace, &self.user_id, &self.record_id] {
            out.extend_from_slice(&(part.len() as u16).to_be_bytes());
            out.extend_from_slice(part.as_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<RecordKey> {
        let mut parts = Vec::with_capacity(3);
        let mut pos = 0usize;
        for _ in 0..3 {
            if pos + 2 > buf.len() {
                return Err(MemoryError::Storage("record key truncated".into()));
            }
            let len = u16::from_be_bytes(buf[pos..pos + 2].try_into().unwrap()) as usize;
            pos += 2;
            if pos + len > buf.len() {
                return Err(MemoryError::Storage("record key truncated".into()));
            }
            let part = std::str::from_utf8(&buf[pos..pos + len])
                .map_err(|_| MemoryError::Storage("record key not utf-8".into()))?;
            parts.push(part.to_string());
            pos += len;
        }
        if pos != buf.len() {
            return Err(MemoryError::Storage("record key trailing bytes".into()));
        }
        let mut it = parts.into_iter();
        Ok(RecordKey {
            namespace: it.next().unwrap(),
            user_id: it.next().unwrap(),
            record_id: it.next().unwrap(),
        })
    }
}

const ERASE_RETRIES: usize = 3;

/// Envelope-encrypting record store with audit trail.
///
/// Reads run concurrently; writes to the same key serialize on a per-key
/// lock before touching the backend.
pub struct RecordStore {
    backend: Arc<dyn StorageBackend>,
    keyring: Keyring,
    audit: AuditLog,
    clock: Arc<dyn Clock>,
    key_locks: Mutex<HashMap<RecordKey, Arc<Mutex<()>>>>,
}

impl RecordStore {
    pub fn new(
        backend: Arc<dyn StorageBackend>,
        keyring: Keyring,
        audit: AuditLog,
        clock: Arc<dyn Clock>,
    ) -> RecordStore {
        RecordStore {
            backend,
            keyring,
            audit,
            clock,
            key_locks: Mutex::new(HashMap::new()),
        }
    }

    fn key_lock(&self, key: &RecordKey) -> Arc<Mutex<()>> {
        let mut locks = self.key_locks.lock().unwrap();
        locks.entry(key.clone()).or_default().clone()
    }

    /// Seals `plaintext` under the active KEK and persists it.
    pub fn put(&self, key: &RecordKey, plaintext: &[u8]) -> Result<EnvelopeRecord> {
        self.put_with_kek(key, plaintext, self.keyring.active_id())
    }

    /// Seals under an explicit KEK id, which must be registered.
    pub fn put_with_kek(
        &self,
        key: &RecordKey,
        plaintext: &[u8],
        kek_id: &str,
    ) -> Result<EnvelopeRecord> {
        let kek = self.keyring.get(kek_id)?;
        let now = self.clock.now_ms();
        let env = envelope::seal(plaintext, kek_id, kek, now)?;
        let guard = self.key_lock(key);
        let _held = guard.lock().unwrap();
        self.backend.write(key, &env.encode())?;
        self.audit
            .append(now, &key.namespace, &key.user_id, &key.record_id, AuditAction::Put)?;
        Ok(env)
    }

    /// Decrypts and returns the original plaintext bytes.
    pub fn get(&self, key: &RecordKey) -> Result<Vec<u8>> {
        let bytes = self.backend.read(key)?.ok_or_else(|| MemoryError::NotFound {
            namespace: key.namespace.clone(),
            user_id: key.user_id.clone(),
            record_id: key.record_id.clone(),
        })?;
        let env = EnvelopeRecord::decode(&bytes)?;
        let kek = self.keyring.get(&env.kek_id)?;
        let plaintext = envelope::open(&env, kek)?;
        self.audit.append(
            self.clock.now_ms(),
            &key.namespace,
            &key.user_id,
            &key.record_id,
            AuditAction::Get,
        )?;
        Ok(plaintext)
    }

    pub fn exists(&self, key: &RecordKey) -> Result<bool> {
        Ok(self.backend.read(key)?.is_some())
    }

    /// Crypto-shredding erasure: the envelope (wrapped DEK first among its
    /// bytes) is physically removed from the backing store. Idempotent;
    /// transient storage failures are retried, never skipped.
    pub fn erase(&self, key: &RecordKey) -> Result<bool> {
        let guard = self.key_lock(key);
        let _held = guard.lock().unwrap();
        let mut last_err = None;
        let mut existed = false;
        let mut done = false;
        for _ in 0..ERASE_RETRIES {
            match self.backend.remove(key) {
                Ok(was_there) => {
                    existed = was_there;
                    done = true;
                    last_err = None;
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        if let Some(e) = last_err {
            return Err(e);
        }
        debug_assert!(done);
        self.audit.append(
            self.clock.now_ms(),
            &key.namespace,
            &key.user_id,
            &key.record_id,
            AuditAction::Erase,
        )?;
        Ok(existed)
    }

    pub fn list(&self, namespace: &str, user_id: &str) -> Result<Vec<RecordKey>> {
        self.backend.list(namespace, user_id)
    }

    pub fn list_namespace(&self, namespace: &str) -> Result<Vec<RecordKey>> {
        self.backend.list_namespace(namespace)
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn backend(&self) -> &Arc<dyn StorageBackend> {
        &self.backend
    }

    pub fn active_kek_id(&self) -> &str {
        self.keyring.active_id()
    }
}

/// True when `haystack` contains any `window`-byte substring of `needle`.
/// This is the erasure-completeness scan oracle: after a shred, the raw
/// backing bytes must share no 16-byte window with the erased plaintext.
pub fn contains_any_window(haystack: &[u8], needle: &[u8], window: usize) -> bool {
    if needle.len() < window || haystack.len() < window {
        return false;
    }
    needle
        .windows(window)
        .any(|w| haystack.windows(window).any(|h| h == w))
}
