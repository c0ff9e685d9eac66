use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::geo::{Geohash6, DISTANCE_BUCKETS};
use super::PurchaseEvent;

/// Bijection between external keys and dense ids `1..=len`. Id 0 is never
/// assigned.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    keys: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Registry {
    /// Returns the id of `key`, registering it if new.
    pub fn intern(&mut self, key: &str) -> u32 {
        if let Some(&id) = self.index.get(key) {
            return id;
        }
        self.keys.push(key.into());
        let id = self.keys.len() as u32;
        self.index.insert(key.into(), id);
        id
    }

    pub fn id(&self, key: &str) -> Option<u32> {
        self.index.get(key).copied()
    }

    pub fn key(&self, id: u32) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.keys.get(i as usize)).map(|s| s.as_str())
    }

    /// Number of registered keys (excluding the reserved 0).
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// `(id, key)` in id order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.keys.iter().enumerate().map(|(i, k)| (i as u32 + 1, k.as_str()))
    }
}

/// Dense id spaces for everything the models embed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub users: Registry,
    /// Takeaway ids start at 1; 0 is padding.
    pub takeaways: Registry,
    /// Shop regions (geohash6); 0 is padding.
    pub regions: Registry,
    /// Attribute field name to value registry.
    pub attributes: BTreeMap<String, Registry>,
}

impl Vocab {
    /// Registers every key of `events` in order of first appearance.
    pub fn from_events(events: &[PurchaseEvent]) -> Self {
        let mut v = Self::default();
        for e in events {
            v.users.intern(&e.user_id);
            v.takeaways.intern(&e.takeaway_id);
            v.regions.intern(e.shop_geohash6.as_str());
            for (k, val) in &e.attributes {
                v.attributes.entry(k.clone()).or_default().intern(val);
            }
        }
        v
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_takeaways(&self) -> usize {
        self.takeaways.len()
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    /// Distance tokens are `1..=16`, 0 is padding.
    pub fn num_distance_buckets(&self) -> usize {
        DISTANCE_BUCKETS
    }

    pub fn region_id(&self, g: &Geohash6) -> Option<u32> {
        self.regions.id(g.as_str())
    }

    /// Stable 64-bit fingerprint of the id assignment (FNV-1a over keys in
    /// id order). Artifacts carry it to detect mismatched datasets.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for (tag, reg) in [("u", &self.users), ("v", &self.takeaways), ("c", &self.regions)] {
            h.write(tag.as_bytes());
            for (_, k) in reg.iter() {
                h.write(k.as_bytes());
                h.write(&[0xff]);
            }
        }
        for (field, reg) in &self.attributes {
            h.write(field.as_bytes());
            for (_, k) in reg.iter() {
                h.write(k.as_bytes());
                h.write(&[0xff]);
            }
        }
        h.finish()
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
