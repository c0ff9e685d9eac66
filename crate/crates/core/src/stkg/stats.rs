use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Family, Stkg};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    /// Real entities (padding excluded).
    pub entities: usize,
    pub users: usize,
    pub takeaways: usize,
    pub attribute_values: usize,
    /// Distinct relations that occur in at least one triple.
    pub relations: usize,
    pub triples: usize,
    pub time_triples: usize,
    pub distance_triples: usize,
    pub user_attribute_triples: usize,
    pub takeaway_attribute_triples: usize,
    /// `degree_histogram[0]` counts isolated entities, `degree_histogram[b]`
    /// for `b >= 1` counts degrees in `[2^(b-1), 2^b)`.
    pub degree_histogram: Vec<usize>,
}

pub fn graph_stats(g: &Stkg) -> GraphStats {
    let mut s = GraphStats {
        entities: g.num_entities() - 1,
        users: g.num_users(),
        takeaways: g.num_takeaways(),
        attribute_values: g.num_attribute_values(),
        triples: g.triples().len(),
        ..Default::default()
    };
    let mut rels = BTreeSet::new();
    for t in g.triples() {
        rels.insert(t.relation);
        match g.family(t.relation, t.head) {
            Family::Time => s.time_triples += 1,
            Family::Distance => s.distance_triples += 1,
            Family::UserAttribute => s.user_attribute_triples += 1,
            Family::TakeawayAttribute => s.takeaway_attribute_triples += 1,
        }
    }
    s.relations = rels.len();
    for e in 1..g.num_entities() as u32 {
        let d = g.degree(e);
        let b = if d == 0 { 0 } else { (usize::BITS - d.leading_zeros()) as usize };
        if s.degree_histogram.len() <= b {
            s.degree_histogram.resize(b + 1, 0);
        }
        s.degree_histogram[b] += 1;
    }
    s
}
