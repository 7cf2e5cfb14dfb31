//! Working memory: ephemeral per-session scratchpad.
//!
//! Pure in-process state. Nothing here ever touches the persistence layer,
//! so a restart always starts from an empty scratchpad. A bounded capacity
//! with priority-then-age eviction keeps the layer from quietly becoming
//! long-term storage.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::Serialize;

use crate::error::{MemoryError, Result};

pub const DEFAULT_CAPACITY: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScratchpadItem {
    pub session_id: String,
    pub key: String,
    pub value: String,
    pub written_ms: i64,
    pub priority: i32,
    /// Insertion order, the age tiebreaker for eviction.
    #[serde(skip)]
    seq: u64,
}

pub struct WorkingMemory {
    sessions: RwLock<HashMap<String, Vec<ScratchpadItem>>>,
    capacity: usize,
    counter: AtomicU64,
}

impl Default for WorkingMemory {
    fn default() -> Self {
        WorkingMemory::new(DEFAULT_CAPACITY)
    }
}

impl WorkingMemory {
    pub fn new(capacity: usize) -> WorkingMemory {
        WorkingMemory {
            sessions: RwLock::new(HashMap::new()),
            capacity: capacity.max(1),
            counter: AtomicU64::new(0),
        }
    }

    /// Upserts by key. When the session is over capacity, the lowest
    /// priority item is evicted, oldest first on ties.
    pub fn set_item(
        &self,
        session_id: &str,
        key: &str,
        value: &str,
        priority: i32,
        written_ms: i64,
    ) -> Result<()> {
        if key.trim().is_empty() {
            return Err(MemoryError::InvalidInput("scratchpad key must be non-empty".into()));
        }
        let mut sessions = self.sessions.write().unwrap();
        let items = sessions.entry(session_id.to_string()).or_default();
        let seq = self.counter.fetch_add(1, Ordering::Relaxed);
        let item = ScratchpadItem {
            session_id: session_id.to_string(),
            key: key.to_string(),
            value: value.to_string(),
            written_ms,
            priority,
            seq,
        };
        if let Some(existing) = items.iter_mut().find(|i| i.key == key) {
            *existing = item;
        } else {
            items.push(item);
        }
        while items.len() > self.capacity {
            let victim = items
                .iter()
                .enumerate()
                .min_by_key(|(_, i)| (i.priority, i.seq))
                .map(|(idx, _)| idx)
                .expect("non-empty over capacity");
            items.remove(victim);
        }
        Ok(())
    }

    pub fn get_item(&self, session_id: &str, key: &str) -> Option<String> {
        self.sessions
            .read()
            .unwrap()
            .get(session_id)
            .and_then(|items| items.iter().find(|i| i.key == key))
            .map(|i| i.value.clone())
    }

    /// Removes every item for the session; durable stores are untouched by
    /// construction. Returns how many items were dropped.
    pub fn clear_session(&self, session_id: &str) -> usize {
        self.sessions
            .write()
            .unwrap()
            .remove(session_id)
            .map(|items| items.len())
            .unwrap_or(0)
    }

    /// Live view for debugging, in insertion order.
    pub fn dump(&self, session_id: &str) -> Vec<ScratchpadItem> {
        let mut items = self
            .sessions
            .read()
            .unwrap()
            .get(session_id)
            .cloned()
            .unwrap_or_default();
        items.sort_by_key(|i| i.seq);
        items
    }

    pub fn len(&self, session_id: &str) -> usize {
        self.sessions
            .read()
            .unwrap()
            .get(session_id)
            .map(|i| i.len())
            .unwrap_or(0)
    }

    pub fn is_empty(&self, session_id: &str) -> bool {
        self.len(session_id) == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_then_get() {
        let wm = WorkingMemory::default();
        wm.set_item("s1", "goal", "book flight", 0, 10).unwrap();
        assert_eq!(wm.get_item("s1", "goal").unwrap(), "book flight");
        assert!(wm.get_item("s1", "missing").is_none());
    }

    #[test]
    fn upsert_replaces_per_key() {
        let wm = WorkingMemory::default();
        wm.set_item("s1", "step", "one", 0, 1).unwrap();
        wm.set_item("s1", "step", "two", 0, 2).unwrap();
        assert_eq!(wm.len("s1"), 1);
        assert_eq!(wm.get_item("s1", "step").unwrap(), "two");
    }

    #[test]
    fn capacity_evicts_lowest_priority_then_oldest() {
        let wm = WorkingMemory::new(64);
        for i in 0..64 {
            wm.set_item("s1", &format!("k{i}"), "v", 0, i as i64).unwrap();
        }
        // 65th insert at equal priority evicts the oldest (k0).
        wm.set_item("s1", "k64", "v", 0, 64).unwrap();
        assert_eq!(wm.len("s1"), 64);
        assert!(wm.get_item("s1", "k0").is_none());
        assert!(wm.get_item("s1", "k64").is_some());

        // Priority protects old items: the lowest-priority entry goes first.
        let wm = WorkingMemory::new(2);
        wm.set_item("s1", "keep", "x", 5, 1).unwrap();
        wm.set_item("s1", "drop", "x", -1, 2).unwrap();
        wm.set_item("s1", "new", "x", 0, 3).unwrap();
        assert!(wm.get_item("s1", "drop").is_none());
        assert!(wm.get_item("s1", "keep").is_some());
        assert!(wm.get_item("s1", "new").is_some());
    }

    #[test]
    fn clear_session_counts_and_isolates() {
        let wm = WorkingMemory::default();
        wm.set_item("s1", "a", "1", 0, 1).unwrap();
        wm.set_item("s1", "b", "2", 0, 2).unwrap();
        wm.set_item("s1", "c", "3", 0, 3).unwrap();
        wm.set_item("s2", "other", "4", 0, 4).unwrap();
        assert_eq!(wm.clear_session("s1"), 3);
        assert!(wm.is_empty("s1"));
        assert!(wm.get_item("s1", "a").is_none());
        // Other sessions unaffected; unknown sessions clear to zero.
        assert_eq!(wm.get_item("s2", "other").unwrap(), "4");
        assert_eq!(wm.clear_session("ghost"), 0);
    }

    #[test]
    fn empty_key_rejected() {
        let wm = WorkingMemory::default();
        assert!(wm.set_item("s1", " ", "v", 0, 0).is_err());
    }
}
