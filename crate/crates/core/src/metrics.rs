//! Sampled ranking metrics.
//!
//! Each evaluation case scores its true target against a pool of negatives
//! the user never bought. The target's rank is `1 + #{negatives scoring at
//! least as high}`, so ties count against the model.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{self, stream};
use crate::{math, Error, Result};

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];
pub const DEFAULT_NEGATIVES: usize = 100;

pub fn rank_of(target: f64, negatives: &[f64]) -> Result<usize> {
    if !target.is_finite() || negatives.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "rank_of", node: 0 });
    }
    Ok(1 + negatives.iter().filter(|&&s| s >= target).count())
}

pub fn hit_at(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / math::log2(rank as f64 + 1.0)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub ks: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub count: usize,
    /// Cases whose negative pool came up short of the requested size.
    pub short_pools: usize,
}

impl RankingMetrics {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hr[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }
}

#[derive(Clone, Debug)]
pub struct RankingAccumulator {
    ks: Vec<usize>,
    hr: Vec<f64>,
    ndcg: Vec<f64>,
    count: usize,
    short_pools: usize,
}

impl RankingAccumulator {
    pub fn new(ks: &[usize]) -> Result<Self> {
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::invalid("cutoffs must be non-empty and positive"));
        }
        let mut ks = ks.to_vec();
        ks.sort_unstable();
        ks.dedup();
        Ok(Self { hr: alloc::vec![0.0; ks.len()], ndcg: alloc::vec![0.0; ks.len()], ks, count: 0, short_pools: 0 })
    }

    pub fn add(&mut self, rank: usize, short_pool: bool) {
        for (i, &k) in self.ks.iter().enumerate() {
            self.hr[i] += hit_at(rank, k);
            self.ndcg[i] += ndcg_at(rank, k);
        }
        self.count += 1;
        self.short_pools += short_pool as usize;
    }

    pub fn finish(self) -> RankingMetrics {
        let n = self.count.max(1) as f64;
        RankingMetrics {
            hr: self.hr.iter().map(|x| x / n).collect(),
            ndcg: self.ndcg.iter().map(|x| x / n).collect(),
            ks: self.ks,
            count: self.count,
            short_pools: self.short_pools,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Negatives {
    pub items: Vec<u32>,
    /// Fewer candidates were available than requested.
    pub short: bool,
}

/// Uniform negatives for `user` from takeaways `1..=num_takeaways`, never
/// drawing PAD, `target`, or anything in the sorted `purchased` list.
pub fn sample_negatives(
    seed: u64,
    user: u32,
    num_takeaways: usize,
    purchased: &[u32],
    target: u32,
    count: usize,
) -> Result<Negatives> {
    if target == 0 || target as usize > num_takeaways {
        return Err(Error::Index { index: target as usize, len: num_takeaways + 1 });
    }
    let excluded = |x: u32| x == target || purchased.binary_search(&x).is_ok();
    let blocked = purchased.iter().filter(|&&x| x >= 1 && x as usize <= num_takeaways && x != target).count() + 1;
    let available = num_takeaways - blocked;
    if available <= count {
        let items: Vec<u32> = (1..=num_takeaways as u32).filter(|&x| !excluded(x)).collect();
        return Ok(Negatives { short: items.len() < count, items });
    }
    let mut rng = rng::derived(seed, &[stream::NEGATIVES, user as u64]);
    let mut seen = BTreeSet::new();
    let mut items = Vec::with_capacity(count);
    while items.len() < count {
        let x = rng.gen_range(1..=num_takeaways as u32);
        if !excluded(x) && seen.insert(x) {
            items.push(x);
        }
    }
    Ok(Negatives { items, short: false })
}
