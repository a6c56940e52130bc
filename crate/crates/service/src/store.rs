use std::collections::HashMap;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use rand::RngCore;
use x2face::networks::EmbeddedFace;

pub const DEFAULT_TTL: Duration = Duration::from_secs(3600);

/// 256 random bits, hex encoded.
pub const ID_BYTES: usize = 32;

/// An embedded face plus the driving vector of the frame it was embedded
/// from, which anchors pose and vector-delta generation.
#[derive(Clone, Debug)]
pub struct Entry {
    pub embedded: EmbeddedFace,
    pub self_vector: Vec<f32>,
}

/// Insert-only map from opaque ids to embedded faces. Entries are never
/// mutated; an edit produces a new entry.
pub struct EmbeddedStore {
    ttl: Option<Duration>,
    entries: RwLock<HashMap<String, (Instant, Arc<Entry>)>>,
}

impl EmbeddedStore {
    pub fn new(ttl: Option<Duration>) -> Self {
        Self {
            ttl,
            entries: RwLock::new(HashMap::new()),
        }
    }

    pub fn insert(&self, entry: Entry) -> String {
        self.insert_at(entry, Instant::now())
    }

    pub fn insert_at(&self, entry: Entry, now: Instant) -> String {
        let mut map = self.entries.write().unwrap_or_else(|e| e.into_inner());
        self.evict(&mut map, now);
        loop {
            let mut raw = [0u8; ID_BYTES];
            rand::rng().fill_bytes(&mut raw);
            let id = hex::encode(raw);
            if let std::collections::hash_map::Entry::Vacant(slot) = map.entry(id.clone()) {
                slot.insert((now, Arc::new(entry)));
                return id;
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<Arc<Entry>> {
        self.get_at(id, Instant::now())
    }

    pub fn get_at(&self, id: &str, now: Instant) -> Option<Arc<Entry>> {
        let map = self.entries.read().unwrap_or_else(|e| e.into_inner());
        let (created, entry) = map.get(id)?;
        if self.expired(*created, now) {
            return None;
        }
        Some(entry.clone())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn expired(&self, created: Instant, now: Instant) -> bool {
        self.ttl.is_some_and(|ttl| now.saturating_duration_since(created) >= ttl)
    }

    fn evict(&self, map: &mut HashMap<String, (Instant, Arc<Entry>)>, now: Instant) {
        if self.ttl.is_some() {
            map.retain(|_, (created, _)| !self.expired(*created, now));
        }
    }
}
