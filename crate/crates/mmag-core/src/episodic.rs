//! Episodic memory: timestamped future events and routine detection.
//!
//! Events fire by polling (`due_events`), never OS timers, so replays with
//! a fake clock are deterministic. Each event fires at most once: the due
//! check-and-mark is atomic per user, so concurrent tickers cannot
//! double-fire. Routine cues are recomputed on demand from interaction
//! stamps and never persisted.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::clock::{day_of_week, hour_of_day, Clock, MS_PER_DAY, MS_PER_HOUR};
use crate::error::{MemoryError, Result};
use crate::persist::{RecordKey, RecordStore};

pub const EVENT_NAMESPACE: &str = "event";
pub const STAMP_NAMESPACE: &str = "stamp";

/// Missed events older than this become expired instead of firing stale.
pub const DEFAULT_GRACE_MS: i64 = 24 * MS_PER_HOUR;
pub const DEFAULT_ROUTINE_WINDOW_DAYS: u32 = 28;
pub const DEFAULT_ROUTINE_MIN_SUPPORT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventStatus {
    Pending,
    Fired,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: String,
    pub user_id: String,
    pub fire_at_ms: i64,
    pub payload: String,
    pub status: EventStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionStamp {
    pub user_id: String,
    pub ts_ms: i64,
    /// Lowercase, non-empty topic tag.
    pub topic: String,
}

/// A habitual pattern: the user keeps raising `topic` in the same weekly
/// (day, 3-hour slot) bucket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutineCue {
    pub user_id: String,
    /// 0 = Sunday .. 6 = Saturday.
    pub day_of_week: u8,
    /// 3-hour bucket, 0..=7.
    pub slot: u8,
    pub topic: String,
    pub support: usize,
    pub window_days: u32,
}

struct UserEvents {
    next_seq: u64,
    events: Vec<EventRecord>,
}

struct UserStamps {
    next_seq: u64,
    stamps: Vec<InteractionStamp>,
}

pub struct EpisodicStore {
    records: Arc<RecordStore>,
    clock: Arc<dyn Clock>,
    grace_ms: i64,
    events: Mutex<HashMap<String, UserEvents>>,
    stamps: Mutex<HashMap<String, UserStamps>>,
}

impl EpisodicStore {
    pub fn new(records: Arc<RecordStore>, clock: Arc<dyn Clock>) -> EpisodicStore {
        EpisodicStore {
            records,
            clock,
            grace_ms: DEFAULT_GRACE_MS,
            events: Mutex::new(HashMap::new()),
            stamps: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_grace_ms(mut self, grace_ms: i64) -> EpisodicStore {
        self.grace_ms = grace_ms;
        self
    }

    fn persist_event(&self, event: &EventRecord) -> Result<()> {
        let key = RecordKey::new(EVENT_NAMESPACE, &event.user_id, &event.event_id);
        self.records.put(&key, serde_json::to_vec(event)?.as_slice())?;
        Ok(())
    }

    fn load_user_events<'a>(
        &self,
        map: &'a mut HashMap<String, UserEvents>,
        user_id: &str,
    ) -> Result<&'a mut UserEvents> {
        if !map.contains_key(user_id) {
            let mut events = Vec::new();
            for key in self.records.list(EVENT_NAMESPACE, user_id)? {
                let bytes = self.records.get(&key)?;
                events.push(serde_json::from_slice::<EventRecord>(&bytes)?);
            }
            events.sort_by(|a, b| a.event_id.cmp(&b.event_id));
            let next_seq = events.len() as u64;
            map.insert(user_id.to_string(), UserEvents { next_seq, events });
        }
        Ok(map.get_mut(user_id).unwrap())
    }

    /// Schedules a future event. Timestamps in the past (per the injected
    /// clock) are rejected.
    pub fn add_event(&self, user_id: &str, fire_at_ms: i64, payload: &str) -> Result<EventRecord> {
        let now = self.clock.now_ms();
        if fire_at_ms <= now {
            return Err(MemoryError::InvalidInput(format!(
                "event fire time {fire_at_ms} is not in the future (now {now})"
            )));
        }
        if payload.trim().is_empty() {
            return Err(MemoryError::InvalidInput("event payload must be non-empty".into()));
        }
        let mut map = self.events.lock().unwrap();
        let user_events = self.load_user_events(&mut map, user_id)?;
        let event = EventRecord {
            event_id: format!("ev-{:06}", user_events.next_seq),
            user_id: user_id.to_string(),
            fire_at_ms,
            payload: payload.trim().to_string(),
            status: EventStatus::Pending,
        };
        self.persist_event(&event)?;
        user_events.next_seq += 1;
        user_events.events.push(event.clone());
        Ok(event)
    }

    /// Pending events with `fire_at_ms` in `[now, now + lookahead]`, sorted
    /// by fire time, atomically marked fired so no event is ever returned
    /// twice. Pending events staler than the grace window expire instead.
    pub fn due_events(
        &self,
        user_id: &str,
        now_ms: i64,
        lookahead_ms: i64,
    ) -> Result<Vec<EventRecord>> {
        if lookahead_ms < 0 {
            return Err(MemoryError::InvalidInput("lookahead must be >= 0".into()));
        }
        let mut map = self.events.lock().unwrap();
        let user_events = self.load_user_events(&mut map, user_id)?;
        let mut due = Vec::new();
        for event in user_events.events.iter_mut() {
            if event.status != EventStatus::Pending {
                continue;
            }
            if event.fire_at_ms < now_ms - self.grace_ms {
                event.status = EventStatus::Expired;
                self.persist_event(event)?;
            } else if event.fire_at_ms >= now_ms && event.fire_at_ms <= now_ms + lookahead_ms {
                event.status = EventStatus::Fired;
                self.persist_event(event)?;
                due.push(event.clone());
            }
        }
        due.sort_by(|a, b| {
            a.fire_at_ms
                .cmp(&b.fire_at_ms)
                .then_with(|| a.event_id.cmp(&b.event_id))
        });
        Ok(due)
    }

    pub fn list_events(&self, user_id: &str) -> Result<Vec<EventRecord>> {
        let mut map = self.events.lock().unwrap();
        let user_events = self.load_user_events(&mut map, user_id)?;
        Ok(user_events.events.clone())
    }

    /// Read-only view of what `due_events` would return, without marking
    /// anything fired. Reactive retrieval uses this so browsing candidates
    /// never consumes an event.
    pub fn peek_due(
        &self,
        user_id: &str,
        now_ms: i64,
        lookahead_ms: i64,
    ) -> Result<Vec<EventRecord>> {
        let mut map = self.events.lock().unwrap();
        let user_events = self.load_user_events(&mut map, user_id)?;
        let mut due: Vec<EventRecord> = user_events
            .events
            .iter()
            .filter(|e| {
                e.status == EventStatus::Pending
                    && e.fire_at_ms >= now_ms
                    && e.fire_at_ms <= now_ms + lookahead_ms
            })
            .cloned()
            .collect();
        due.sort_by(|a, b| {
            a.fire_at_ms
                .cmp(&b.fire_at_ms)
                .then_with(|| a.event_id.cmp(&b.event_id))
        });
        Ok(due)
    }

    /// Appends an interaction stamp for routine mining. Topics are
    /// normalized to lowercase.
    pub fn log_interaction(&self, user_id: &str, ts_ms: i64, topic: &str) -> Result<InteractionStamp> {
        let topic = topic.trim().to_lowercase();
        if topic.is_empty() {
            return Err(MemoryError::InvalidInput("topic must be non-empty".into()));
        }
        let mut map = self.stamps.lock().unwrap();
        let user_stamps = self.load_user_stamps(&mut map, user_id)?;
        let stamp = InteractionStamp {
            user_id: user_id.to_string(),
            ts_ms,
            topic,
        };
        let key = RecordKey::new(
            STAMP_NAMESPACE,
            user_id,
            format!("st-{:08}", user_stamps.next_seq),
        );
        self.records.put(&key, serde_json::to_vec(&stamp)?.as_slice())?;
        user_stamps.next_seq += 1;
        user_stamps.stamps.push(stamp.clone());
        Ok(stamp)
    }

    fn load_user_stamps<'a>(
        &self,
        map: &'a mut HashMap<String, UserStamps>,
        user_id: &str,
    ) -> Result<&'a mut UserStamps> {
        if !map.contains_key(user_id) {
            let mut stamps = Vec::new();
            for key in self.records.list(STAMP_NAMESPACE, user_id)? {
                let bytes = self.records.get(&key)?;
                stamps.push(serde_json::from_slice::<InteractionStamp>(&bytes)?);
            }
            let next_seq = stamps.len() as u64;
            map.insert(user_id.to_string(), UserStamps { next_seq, stamps });
        }
        Ok(map.get_mut(user_id).unwrap())
    }

    pub fn stamps(&self, user_id: &str) -> Result<Vec<InteractionStamp>> {
        let mut map = self.stamps.lock().unwrap();
        let user_stamps = self.load_user_stamps(&mut map, user_id)?;
        Ok(user_stamps.stamps.clone())
    }

    /// Detects habitual (day-of-week, 3-hour slot, topic) buckets inside
    /// the window. A cue needs at least `min_support` stamps spread over at
    /// least `min_support` distinct calendar weeks, so a one-week burst
    /// never counts as a routine. Pure: same stamps, clock, and parameters
    /// give the same cues.
    pub fn detect_routines(
        &self,
        user_id: &str,
        now_ms: i64,
        window_days: u32,
        min_support: usize,
    ) -> Result<Vec<RoutineCue>> {
        if window_days < 7 {
            return Err(MemoryError::InvalidInput("window must cover at least 7 days".into()));
        }
        let stamps = self.stamps(user_id)?;
        Ok(detect_routines_in(
            user_id,
            &stamps,
            now_ms,
            window_days,
            min_support,
        ))
    }
}

/// Bucketing core of routine detection, shared with the CLI and testable
/// without a store.
pub fn detect_routines_in(
    user_id: &str,
    stamps: &[InteractionStamp],
    now_ms: i64,
    window_days: u32,
    min_support: usize,
) -> Vec<RoutineCue> {
    let window_start = now_ms - window_days as i64 * MS_PER_DAY;
    let mut buckets: BTreeMap<(u8, u8, String), (usize, std::collections::BTreeSet<i64>)> =
        BTreeMap::new();
    for stamp in stamps {
        if stamp.ts_ms < window_start || stamp.ts_ms > now_ms {
            continue;
        }
        let dow = day_of_week(stamp.ts_ms);
        let slot = hour_of_day(stamp.ts_ms) / 3;
        let week = stamp.ts_ms.div_euclid(MS_PER_DAY).div_euclid(7);
        let entry = buckets
            .entry((dow, slot, stamp.topic.clone()))
            .or_insert_with(|| (0, Default::default()));
        entry.0 += 1;
        entry.1.insert(week);
    }
    let mut cues: Vec<RoutineCue> = buckets
        .into_iter()
        .filter(|(_, (count, weeks))| *count >= min_support && weeks.len() >= min_support)
        .map(|((dow, slot, topic), (count, _))| RoutineCue {
            user_id: user_id.to_string(),
            day_of_week: dow,
            slot,
            topic,
            support: count,
            window_days,
        })
        .collect();
    cues.sort_by(|a, b| {
        b.support
            .cmp(&a.support)
            .then_with(|| a.topic.cmp(&b.topic))
            .then_with(|| (a.day_of_week, a.slot).cmp(&(b.day_of_week, b.slot)))
    });
    cues
}
