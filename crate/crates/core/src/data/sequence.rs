use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use super::geo::{bucketize_distance, spherical_distance};
use super::{PurchaseEvent, Vocab};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Fixed-length, left-padded purchase history with its next-item target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    /// Position in the owning [`SequenceSet`].
    pub id: u32,
    pub user: u32,
    pub items: Vec<u32>,
    pub regions: Vec<u32>,
    /// Distance tokens (bucket index + 1).
    pub distances: Vec<u32>,
    pub target: u32,
    pub split: Split,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Index of the most recent real item.
    pub fn anchor(&self) -> Option<usize> {
        self.items.iter().rposition(|&x| x != 0)
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        self.items.iter().map(|&x| x == 0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceConfig {
    /// Length `n` of every sequence.
    pub max_len: usize,
    /// Keep at most this many (most recent) training pairs per user.
    pub max_train_per_user: Option<usize>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self { max_len: 128, max_train_per_user: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSet {
    pub max_len: usize,
    pub sequences: Vec<Sequence>,
    /// Sorted takeaway ids each user ever bought, indexed by user id.
    pub purchased: Vec<Vec<u32>>,
    /// Users with fewer than two purchases.
    pub skipped_users: usize,
}

impl SequenceSet {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sequence> + '_ {
        self.sequences.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Contiguous event ranges per user in `events`, which must be grouped by
/// user as [`super::ingest_events`] leaves them.
pub fn user_ranges(events: &[PurchaseEvent], vocab: &Vocab) -> Result<Vec<(u32, Range<usize>)>> {
    let mut out: Vec<(u32, Range<usize>)> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        let u = vocab
            .users
            .id(&e.user_id)
            .ok_or_else(|| Error::Consistency(alloc::format!("unregistered user {}", e.user_id)))?;
        match out.last_mut() {
            Some((last, r)) if *last == u => r.end = i + 1,
            _ => {
                if out.iter().any(|(x, _)| *x == u) {
                    return Err(Error::Consistency(alloc::format!("events of user {} are not contiguous", e.user_id)));
                }
                out.push((u, i..i + 1))
            }
        }
    }
    Ok(out)
}

/// Number of leading purchases of a user's history that belong to training.
/// The last two purchases are held out when the user has at least three.
pub fn training_prefix_len(purchases: usize) -> usize {
    if purchases < 3 {
        purchases
    } else {
        purchases - 2
    }
}

struct Token {
    item: u32,
    region: u32,
    distance: u32,
}

fn tokens(events: &[PurchaseEvent], vocab: &Vocab) -> Result<Vec<Token>> {
    events
        .iter()
        .map(|e| {
            let item = vocab
                .takeaways
                .id(&e.takeaway_id)
                .ok_or_else(|| Error::Consistency(alloc::format!("unregistered takeaway {}", e.takeaway_id)))?;
            let region = vocab
                .region_id(&e.shop_geohash6)
                .ok_or_else(|| Error::Consistency(alloc::format!("unregistered region {}", e.shop_geohash6)))?;
            let km = spherical_distance(e.user_geohash6.centroid(), e.shop_geohash6.centroid())?;
            Ok(Token { item, region, distance: bucketize_distance(km)?.token() })
        })
        .collect()
}

fn window(history: &[Token], n: usize) -> (Vec<u32>, Vec<u32>, Vec<u32>) {
    let recent = &history[history.len().saturating_sub(n)..];
    let pad = n - recent.len();
    let mut items = vec![0; pad];
    let mut regions = vec![0; pad];
    let mut distances = vec![0; pad];
    for t in recent {
        items.push(t.item);
        regions.push(t.region);
        distances.push(t.distance);
    }
    (items, regions, distances)
}

/// Builds leave-one-out samples: per user the last purchase is the test
/// target, the one before it the validation target, and every earlier
/// purchase after the first is a training target for its prefix.
pub fn build_sequences(events: &[PurchaseEvent], vocab: &Vocab, cfg: &SequenceConfig) -> Result<SequenceSet> {
    let n = cfg.max_len;
    if n == 0 {
        return Err(Error::invalid("sequence length must be positive"));
    }
    let mut set = SequenceSet { max_len: n, purchased: vec![Vec::new(); vocab.num_users() + 1], ..Default::default() };
    for (user, range) in user_ranges(events, vocab)? {
        let toks = tokens(&events[range], vocab)?;
        let mut bought: Vec<u32> = toks.iter().map(|t| t.item).collect();
        bought.sort_unstable();
        bought.dedup();
        set.purchased[user as usize] = bought;

        let m = toks.len();
        if m < 2 {
            set.skipped_users += 1;
            continue;
        }
        let train_end = training_prefix_len(m);
        // target index t uses toks[..t] as history
        let mut train_targets: Vec<usize> = (1..train_end).collect();
        if let Some(cap) = cfg.max_train_per_user {
            let drop = train_targets.len().saturating_sub(cap);
            train_targets.drain(..drop);
        }
        let mut push = |t: usize, split: Split| {
            let (items, regions, distances) = window(&toks[..t], n);
            let id = set.sequences.len() as u32;
            set.sequences.push(Sequence { id, user, items, regions, distances, target: toks[t].item, split });
        };
        for t in train_targets {
            push(t, Split::Train);
        }
        if m >= 3 {
            push(m - 2, Split::Valid);
            push(m - 1, Split::Test);
        }
    }
    Ok(set)
}
