//! Spatial-temporal knowledge graph over users, takeaways and attribute
//! values.
//!
//! Entity ids: `0` is padding, `1..=V` are takeaways (same ids as the
//! vocabulary), `V+1..=V+U` are users, attribute values follow. Relation ids:
//! `0..168` are weekday-hour slots, the next 16 are distance buckets, then one
//! relation per attribute field.

mod sample;
mod stats;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{
    bucketize_distance, spherical_distance, training_prefix_len, user_ranges, PurchaseEvent, Vocab, DISTANCE_BUCKETS,
    USER_ATTRIBUTE_PREFIX,
};
use crate::{Error, Result};

pub use sample::{sample_subgraph, Edge, Subgraph};
pub use stats::{graph_stats, GraphStats};

pub const TIME_RELATIONS: usize = 7 * 24;

/// Weekday-hour relation of a unix timestamp (UTC, Monday = 0).
pub fn time_relation(timestamp: u64) -> u32 {
    let days = timestamp / 86_400;
    let weekday = (days + 3) % 7;
    let hour = (timestamp % 86_400) / 3600;
    (weekday * 24 + hour) as u32
}

pub fn distance_relation(bucket: usize) -> u32 {
    (TIME_RELATIONS + bucket) as u32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Time,
    Distance,
    UserAttribute,
    TakeawayAttribute,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Entity {
    Pad,
    Takeaway(u32),
    User(u32),
    /// Field name with any user prefix removed, and value.
    Attribute {
        field: String,
        value: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Time { weekday: u8, hour: u8 },
    Distance { bucket: u8 },
    Attribute(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

/// Immutable triple store with undirected adjacency.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stkg {
    num_takeaways: usize,
    num_users: usize,
    attribute_values: Vec<(String, String)>,
    attribute_fields: Vec<String>,
    triples: Vec<Triple>,
    offsets: Vec<usize>,
    /// `(relation, neighbour)` sorted per entity.
    adjacency: Vec<(u32, u32)>,
}

impl Stkg {
    /// Entity count including the padding entity.
    pub fn num_entities(&self) -> usize {
        1 + self.num_takeaways + self.num_users + self.attribute_values.len()
    }

    pub fn num_relations(&self) -> usize {
        TIME_RELATIONS + DISTANCE_BUCKETS + self.attribute_fields.len()
    }

    pub fn num_takeaways(&self) -> usize {
        self.num_takeaways
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_attribute_values(&self) -> usize {
        self.attribute_values.len()
    }

    pub fn takeaway_entity(&self, takeaway: u32) -> u32 {
        takeaway
    }

    pub fn user_entity(&self, user: u32) -> u32 {
        self.num_takeaways as u32 + user
    }

    pub fn entity(&self, id: u32) -> Option<Entity> {
        let id = id as usize;
        let v = self.num_takeaways;
        let u = self.num_users;
        Some(match id {
            0 => Entity::Pad,
            i if i <= v => Entity::Takeaway(i as u32),
            i if i <= v + u => Entity::User((i - v) as u32),
            i => {
                let (field, value) = self.attribute_values.get(i - v - u - 1)?;
                Entity::Attribute { field: field.clone(), value: value.clone() }
            }
        })
    }

    pub fn relation(&self, id: u32) -> Option<Relation> {
        let id = id as usize;
        if id < TIME_RELATIONS {
            Some(Relation::Time { weekday: (id / 24) as u8, hour: (id % 24) as u8 })
        } else if id < TIME_RELATIONS + DISTANCE_BUCKETS {
            Some(Relation::Distance { bucket: (id - TIME_RELATIONS) as u8 })
        } else {
            self.attribute_fields.get(id - TIME_RELATIONS - DISTANCE_BUCKETS).map(|f| Relation::Attribute(f.clone()))
        }
    }

    pub fn family(&self, relation: u32, head: u32) -> Family {
        let r = relation as usize;
        if r < TIME_RELATIONS {
            Family::Time
        } else if r < TIME_RELATIONS + DISTANCE_BUCKETS {
            Family::Distance
        } else if head as usize > self.num_takeaways {
            Family::UserAttribute
        } else {
            Family::TakeawayAttribute
        }
    }

    /// Deduplicated triples in ascending order.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// `(relation, neighbour)` pairs of an entity; empty for unknown ids.
    pub fn neighbors(&self, entity: u32) -> &[(u32, u32)] {
        let e = entity as usize;
        if e + 1 >= self.offsets.len() {
            return &[];
        }
        &self.adjacency[self.offsets[e]..self.offsets[e + 1]]
    }

    pub fn degree(&self, entity: u32) -> usize {
        self.neighbors(entity).len()
    }

    pub fn contains_edge(&self, a: u32, relation: u32, b: u32) -> bool {
        self.neighbors(a).binary_search(&(relation, b)).is_ok()
    }

    /// Assembles a graph from explicit parts, validating every id.
    pub fn from_triples(
        num_takeaways: usize,
        num_users: usize,
        attribute_values: Vec<(String, String)>,
        attribute_fields: Vec<String>,
        triples: impl IntoIterator<Item = Triple>,
    ) -> Result<Self> {
        let mut g = Self { num_takeaways, num_users, attribute_values, attribute_fields, ..Default::default() };
        let ne = g.num_entities() as u32;
        let nr = g.num_relations() as u32;
        let set: BTreeSet<Triple> = triples.into_iter().collect();
        for t in &set {
            if t.head == 0 || t.tail == 0 || t.head >= ne || t.tail >= ne || t.relation >= nr || t.head == t.tail {
                return Err(Error::Consistency(format!("invalid triple {t:?}")));
            }
        }
        g.triples = set.into_iter().collect();
        let mut lists: Vec<Vec<(u32, u32)>> = alloc::vec![Vec::new(); ne as usize];
        for t in &g.triples {
            lists[t.head as usize].push((t.relation, t.tail));
            lists[t.tail as usize].push((t.relation, t.head));
        }
        g.offsets.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            g.adjacency.extend(l);
            g.offsets.push(g.adjacency.len());
        }
        Ok(g)
    }
}

fn strip_user(field: &str) -> &str {
    field.strip_prefix(USER_ATTRIBUTE_PREFIX).unwrap_or(field)
}

/// Builds the graph from cleaned events. Purchase triples come only from
/// each user's training region; user attributes likewise. Takeaway
/// attributes come from every event.
pub fn build_stkg(events: &[PurchaseEvent], vocab: &Vocab) -> Result<Stkg> {
    let num_takeaways = vocab.num_takeaways();
    let num_users = vocab.num_users();

    // attribute value entities and relations in first-appearance order
    let mut values: Vec<(String, String)> = Vec::new();
    let mut value_ids: BTreeMap<(String, String), u32> = BTreeMap::new();
    let mut fields: Vec<String> = Vec::new();
    let mut field_ids: BTreeMap<String, u32> = BTreeMap::new();
    let base = (1 + num_takeaways + num_users) as u32;
    let rel_base = (TIME_RELATIONS + DISTANCE_BUCKETS) as u32;
    let mut value_entity = |field: &str, value: &str| -> u32 {
        let key = (String::from(strip_user(field)), String::from(value));
        if let Some(&id) = value_ids.get(&key) {
            return id;
        }
        let id = base + values.len() as u32;
        values.push(key.clone());
        value_ids.insert(key, id);
        id
    };
    let mut field_relation = |field: &str| -> u32 {
        if let Some(&id) = field_ids.get(field) {
            return id;
        }
        let id = rel_base + fields.len() as u32;
        fields.push(field.into());
        field_ids.insert(field.into(), id);
        id
    };

    let mut triples = Vec::new();
    for (user, range) in user_ranges(events, vocab)? {
        let u = num_takeaways as u32 + user;
        let history = &events[range];
        let train = training_prefix_len(history.len());
        for (i, e) in history.iter().enumerate() {
            let v = vocab
                .takeaways
                .id(&e.takeaway_id)
                .ok_or_else(|| Error::Consistency(format!("unregistered takeaway {}", e.takeaway_id)))?;
            for (field, value) in e.takeaway_attributes() {
                let r = field_relation(field);
                triples.push(Triple { head: v, relation: r, tail: value_entity(field, value) });
            }
            if i >= train {
                continue;
            }
            triples.push(Triple { head: u, relation: time_relation(e.timestamp), tail: v });
            let km = spherical_distance(e.user_geohash6.centroid(), e.shop_geohash6.centroid())?;
            triples.push(Triple { head: u, relation: distance_relation(bucketize_distance(km)?.index()), tail: v });
            for (field, value) in e.user_attributes() {
                let r = field_relation(field);
                triples.push(Triple { head: u, relation: r, tail: value_entity(field, value) });
            }
        }
    }
    Stkg::from_triples(num_takeaways, num_users, values, fields, triples)
}
