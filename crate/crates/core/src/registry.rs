//! Thing Description Directory.
//!
//! Stores TDs, answers discovery queries, expires Things whose heartbeat is
//! older than their TTL and keeps an append-only membership event log that
//! subscribers poll with a cursor. All time comes from a [`Clock`] so the
//! liveness rules can be exercised on a simulated clock.

use crate::td::{matches, ThingDescription, TdQuery};
use chrono::{DateTime, Duration, TimeZone, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Manually advanced clock for tests and replays.
#[derive(Debug, Clone)]
pub struct SimClock(Arc<Mutex<DateTime<Utc>>>);

impl SimClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        SimClock(Arc::new(Mutex::new(start)))
    }

    pub fn at_epoch() -> Self {
        Self::new(Utc.timestamp_opt(0, 0).unwrap())
    }

    pub fn advance_secs(&self, secs: i64) {
        let mut now = self.0.lock();
        *now += Duration::seconds(secs);
    }

    pub fn set(&self, t: DateTime<Utc>) {
        *self.0.lock() = t;
    }
}

impl Clock for SimClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("thing `{0}` is already registered with a different description")]
    ConflictingId(String),
    #[error("unknown thing `{0}`")]
    UnknownThing(String),
    #[error(transparent)]
    Invalid(#[from] crate::td::TdError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegistryEntry {
    pub td: ThingDescription,
    pub registered_at: DateTime<Utc>,
    pub last_seen: DateTime<Utc>,
    /// Sequence number of the `joined` event that created this entry.
    pub seq: u64,
}

impl RegistryEntry {
    fn is_stale(&self, now: DateTime<Utc>) -> bool {
        now - self.last_seen > Duration::seconds(self.td.ttl_seconds as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Joined,
    Left,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MembershipEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub thing_id: String,
    pub at: DateTime<Utc>,
}

pub struct Registry {
    clock: Arc<dyn Clock>,
    entries: HashMap<String, RegistryEntry>,
    events: Vec<MembershipEvent>,
}

impl Registry {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Registry {
            clock,
            entries: HashMap::new(),
            events: Vec::new(),
        }
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    fn push_event(&mut self, kind: EventKind, thing_id: &str, at: DateTime<Utc>) -> u64 {
        let seq = self.events.len() as u64 + 1;
        self.events.push(MembershipEvent {
            seq,
            kind,
            thing_id: thing_id.to_string(),
            at,
        });
        seq
    }

    /// Registers `td`, returning the sequence number of its `joined` event.
    /// Re-registering an identical description only refreshes `last_seen`.
    pub fn register(&mut self, td: ThingDescription) -> Result<u64, RegistryError> {
        td.validate()?;
        let now = self.clock.now();
        if let Some(entry) = self.entries.get_mut(&td.id) {
            if entry.td != td {
                return Err(RegistryError::ConflictingId(td.id));
            }
            entry.last_seen = now;
            return Ok(entry.seq);
        }
        let seq = self.push_event(EventKind::Joined, &td.id, now);
        self.entries.insert(
            td.id.clone(),
            RegistryEntry {
                td,
                registered_at: now,
                last_seen: now,
                seq,
            },
        );
        Ok(seq)
    }

    pub fn get(&self, id: &str) -> Option<&RegistryEntry> {
        self.entries.get(id)
    }

    /// The TD of `id` unless it is past its TTL.
    pub fn get_live(&self, id: &str) -> Option<&ThingDescription> {
        let now = self.clock.now();
        self.entries
            .get(id)
            .filter(|e| !e.is_stale(now))
            .map(|e| &e.td)
    }

    /// Live entries matching `q`, in registration order. Entries past their TTL
    /// are hidden even if the sweep has not run yet.
    pub fn query(&self, q: &TdQuery) -> Vec<ThingDescription> {
        let now = self.clock.now();
        let mut hits: Vec<&RegistryEntry> = self
            .entries
            .values()
            .filter(|e| !e.is_stale(now) && matches(&e.td, q))
            .collect();
        hits.sort_by_key(|e| e.seq);
        hits.into_iter().map(|e| e.td.clone()).collect()
    }

    pub fn heartbeat(&mut self, thing_id: &str) -> Result<(), RegistryError> {
        let now = self.clock.now();
        let entry = self
            .entries
            .get_mut(thing_id)
            .ok_or_else(|| RegistryError::UnknownThing(thing_id.to_string()))?;
        entry.last_seen = now;
        Ok(())
    }

    pub fn deregister(&mut self, thing_id: &str) -> Result<u64, RegistryError> {
        if self.entries.remove(thing_id).is_none() {
            return Err(RegistryError::UnknownThing(thing_id.to_string()));
        }
        let now = self.clock.now();
        Ok(self.push_event(EventKind::Left, thing_id, now))
    }

    /// Removes every entry whose last heartbeat is strictly older than its TTL.
    /// Expired ids are processed in registration order so the emitted events
    /// depend only on the registry state and `now`.
    pub fn liveness_sweep(&mut self, now: DateTime<Utc>) -> Vec<MembershipEvent> {
        let mut stale: Vec<(u64, String)> = self
            .entries
            .values()
            .filter(|e| e.is_stale(now))
            .map(|e| (e.seq, e.td.id.clone()))
            .collect();
        stale.sort();
        let mut out = Vec::with_capacity(stale.len());
        for (_, id) in stale {
            self.entries.remove(&id);
            let seq = self.push_event(EventKind::Expired, &id, now);
            out.push(self.events[seq as usize - 1].clone());
        }
        out
    }

    /// Sweep at the clock's current time.
    pub fn sweep(&mut self) -> Vec<MembershipEvent> {
        let now = self.clock.now();
        self.liveness_sweep(now)
    }

    pub fn events_since(&self, cursor: u64) -> Vec<MembershipEvent> {
        let start = (cursor as usize).min(self.events.len());
        self.events[start..].to_vec()
    }

    pub fn latest_seq(&self) -> u64 {
        self.events.len() as u64
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
