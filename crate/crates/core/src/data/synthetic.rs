//! Seeded generator of purchase logs with planted spatial-temporal structure.
//!
//! Every user has a home and a work region and a daily routine of ordering
//! slots. Weekday slots before 17:00 happen at work, everything else at home.
//! Categories have a preferred slot, shops sit in regions, and a set of
//! planted `(A, B)` pairs makes `B` likely to be ordered shortly after `A`
//! from the same place. A noise rate replaces a fraction of purchases with a
//! uniformly random takeaway.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::geo::{Geohash6, LatLon};
use super::PurchaseEvent;
use crate::math;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Hours of the ordering slots: breakfast, lunch, afternoon, dinner, late.
pub const SLOT_HOURS: [u64; 5] = [8, 12, 15, 19, 22];
const WORK_SLOTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_takeaways: usize,
    pub n_regions: usize,
    pub n_categories: usize,
    pub brands_per_category: usize,
    /// Mean purchases per user; actual counts are uniform in `[m/2, 3m/2]`.
    pub events_per_user: usize,
    /// Probability that a purchase is a uniformly random takeaway.
    pub noise: f64,
    pub co_purchase_pairs: usize,
    /// Probability that `B` directly follows a purchase of `A`.
    pub co_purchase_prob: f64,
    /// Probability of re-ordering the user's favourite for the slot and place.
    pub favorite_prob: f64,
    /// Probability that a pattern purchase uses the user's slot category.
    pub slot_affinity: f64,
    /// Probability that a pattern purchase comes from a shop in the current
    /// region.
    pub locality: f64,
    pub city_radius_km: f64,
    pub center_lat: f64,
    pub center_lon: f64,
    pub start_timestamp: u64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_takeaways: 500,
            n_regions: 12,
            n_categories: 10,
            brands_per_category: 4,
            events_per_user: 30,
            noise: 0.3,
            co_purchase_pairs: 60,
            co_purchase_prob: 0.6,
            favorite_prob: 0.3,
            slot_affinity: 0.8,
            locality: 0.85,
            city_radius_km: 12.0,
            center_lat: 30.59,
            center_lon: 114.30,
            // 2024-01-01T00:00:00Z, a Monday
            start_timestamp: 1_704_067_200,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_takeaways", self.n_takeaways),
            ("n_regions", self.n_regions),
            ("n_categories", self.n_categories),
            ("brands_per_category", self.brands_per_category),
            ("events_per_user", self.events_per_user),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let probs = [
            ("noise", self.noise),
            ("co_purchase_prob", self.co_purchase_prob),
            ("favorite_prob", self.favorite_prob),
            ("slot_affinity", self.slot_affinity),
            ("locality", self.locality),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.co_purchase_prob + self.favorite_prob > 1.0 {
            return Err(Error::Config(format!(
                "co_purchase_prob + favorite_prob = {} exceeds 1",
                self.co_purchase_prob + self.favorite_prob
            )));
        }
        if self.co_purchase_pairs > self.n_takeaways {
            return Err(Error::Config("more co-purchase pairs than takeaways".into()));
        }
        if !(self.city_radius_km > 0.0) {
            return Err(Error::Config("city_radius_km must be positive".into()));
        }
        LatLon::new(self.center_lat, self.center_lon)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    /// Grouped by user, chronological within a user.
    pub events: Vec<PurchaseEvent>,
    /// Planted `(A, B)` takeaway keys.
    pub pairs: Vec<(String, String)>,
}

struct Item {
    key: String,
    region: usize,
    category: usize,
    brand: usize,
}

struct World {
    regions: Vec<Geohash6>,
    items: Vec<Item>,
    by_category: Vec<Vec<usize>>,
    by_category_region: BTreeMap<(usize, usize), Vec<usize>>,
    pair_tail: Vec<Option<usize>>,
}

fn region_cells(cfg: &SyntheticConfig, rng: &mut Rng) -> Vec<Geohash6> {
    let mut out: Vec<Geohash6> = Vec::with_capacity(cfg.n_regions);
    let km_per_deg = 111.32;
    let cos_lat = math::cos(cfg.center_lat * core::f64::consts::PI / 180.0).max(0.05);
    while out.len() < cfg.n_regions {
        let r = cfg.city_radius_km * math::sqrt(rng.gen::<f64>());
        let a = core::f64::consts::TAU * rng.gen::<f64>();
        let lat = (cfg.center_lat + r * math::sin(a) / km_per_deg).clamp(-89.9, 89.9);
        let lon = cfg.center_lon + r * math::cos(a) / (km_per_deg * cos_lat);
        let lon = lon - 360.0 * math::floor((lon + 180.0) / 360.0);
        let Ok(g) = Geohash6::encode(LatLon { lat, lon }) else { continue };
        if !out.contains(&g) {
            out.push(g);
        }
    }
    out
}

fn build_world(cfg: &SyntheticConfig, rng: &mut Rng) -> World {
    let regions = region_cells(cfg, rng);
    let mut items = Vec::with_capacity(cfg.n_takeaways);
    let mut by_category = vec![Vec::new(); cfg.n_categories];
    let mut by_category_region: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for k in 0..cfg.n_takeaways {
        // round-robin keeps every region and category populated
        let region = if k < cfg.n_regions { k } else { rng.gen_range(0..cfg.n_regions) };
        let category = if k < cfg.n_categories { k } else { rng.gen_range(0..cfg.n_categories) };
        let brand = category * cfg.brands_per_category + rng.gen_range(0..cfg.brands_per_category);
        by_category[category].push(k);
        by_category_region.entry((category, region)).or_default().push(k);
        items.push(Item { key: format!("t{k:05}"), region, category, brand });
    }
    let mut pair_tail = vec![None; cfg.n_takeaways];
    let heads = rand::seq::index::sample(rng, cfg.n_takeaways, cfg.co_purchase_pairs).into_vec();
    for a in heads {
        let same: Vec<usize> = (0..cfg.n_takeaways).filter(|&b| b != a && items[b].region == items[a].region).collect();
        let b = if same.is_empty() { (a + 1) % cfg.n_takeaways } else { same[rng.gen_range(0..same.len())] };
        if b != a {
            pair_tail[a] = Some(b);
        }
    }
    World { regions, items, by_category, by_category_region, pair_tail }
}

struct Persona {
    home: usize,
    work: usize,
    slots: Vec<usize>,
    /// Favourite category per slot.
    category: [usize; 5],
    /// Favourite takeaway per (slot, at_work).
    favorite: BTreeMap<(usize, bool), usize>,
}

fn slot_categories(cfg: &SyntheticConfig, slot: usize) -> Vec<usize> {
    (0..cfg.n_categories).filter(|c| c % SLOT_HOURS.len() == slot).collect()
}

fn pick<T: Copy>(rng: &mut Rng, xs: &[T]) -> Option<T> {
    (!xs.is_empty()).then(|| xs[rng.gen_range(0..xs.len())])
}

impl World {
    fn pattern_item(&self, cfg: &SyntheticConfig, rng: &mut Rng, category: usize, region: usize) -> usize {
        let local = self.by_category_region.get(&(category, region)).map(|v| v.as_slice()).unwrap_or(&[]);
        if rng.gen::<f64>() < cfg.locality {
            if let Some(i) = pick(rng, local) {
                return i;
            }
        }
        pick(rng, &self.by_category[category]).unwrap_or_else(|| rng.gen_range(0..self.items.len()))
    }

    fn persona(&self, cfg: &SyntheticConfig, rng: &mut Rng) -> Persona {
        let home = rng.gen_range(0..cfg.n_regions);
        let work = if cfg.n_regions > 1 {
            let w = rng.gen_range(0..cfg.n_regions - 1);
            if w >= home {
                w + 1
            } else {
                w
            }
        } else {
            home
        };
        let k = rng.gen_range(2..=3);
        let mut slots = rand::seq::index::sample(rng, SLOT_HOURS.len(), k).into_vec();
        slots.sort_unstable();
        let mut category = [0; 5];
        for (s, c) in category.iter_mut().enumerate() {
            let affine = slot_categories(cfg, s);
            *c = match pick(rng, &affine) {
                Some(a) if rng.gen::<f64>() < cfg.slot_affinity => a,
                _ => rng.gen_range(0..cfg.n_categories),
            };
        }
        let mut favorite = BTreeMap::new();
        for &s in &slots {
            for at_work in [false, true] {
                let region = if at_work { work } else { home };
                favorite.insert((s, at_work), self.pattern_item(cfg, rng, category[s], region));
            }
        }
        Persona { home, work, slots, category, favorite }
    }
}

/// Generates a reproducible event log. Identical configurations produce
/// identical output.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = rng::derived(cfg.seed, &[rng::stream::SYNTHETIC]);
    let world = build_world(cfg, &mut rng);
    let mut events = Vec::new();
    let lo = (cfg.events_per_user / 2).max(1);
    let hi = (cfg.events_per_user * 3 / 2).max(lo);

    for u in 0..cfg.n_users {
        let p = world.persona(cfg, &mut rng);
        let user_key = format!("u{u:05}");
        let count = rng.gen_range(lo..=hi);
        let mut day: u64 = rng.gen_range(0..7);
        let mut slot_idx = 0;
        let mut prev: Option<(usize, u64, usize)> = None; // item, timestamp, region
        for _ in 0..count {
            let (mut ts, mut region, slot, at_work) = {
                let slot = p.slots[slot_idx];
                let weekday = (day + cfg.start_timestamp / 86_400 + 3) % 7 < 5;
                let at_work = weekday && slot < WORK_SLOTS;
                let region = if at_work { p.work } else { p.home };
                let ts = cfg.start_timestamp + day * 86_400 + SLOT_HOURS[slot] * 3600 + rng.gen_range(0..45u64) * 60;
                (ts, region, slot, at_work)
            };
            let tail = prev.and_then(|(a, _, _)| world.pair_tail[a]);
            let item = if rng.gen::<f64>() < cfg.noise {
                rng.gen_range(0..world.items.len())
            } else {
                let r: f64 = rng.gen();
                match tail {
                    Some(b) if r < cfg.co_purchase_prob => {
                        let (_, pts, preg) = prev.expect("tail implies prev");
                        ts = pts + rng.gen_range(20..60u64) * 60;
                        region = preg;
                        b
                    }
                    _ => {
                        let choose = |rng: &mut Rng| {
                            if r < cfg.co_purchase_prob + cfg.favorite_prob {
                                p.favorite[&(slot, at_work)]
                            } else {
                                let cat = if rng.gen::<f64>() < cfg.slot_affinity {
                                    p.category[slot]
                                } else {
                                    rng.gen_range(0..cfg.n_categories)
                                };
                                world.pattern_item(cfg, rng, cat, region)
                            }
                        };
                        let mut it = choose(&mut rng);
                        let mut tries = 0;
                        while Some(it) == tail && tries < 16 {
                            // the planted follower only appears through the pair rule
                            it = if tries < 8 { choose(&mut rng) } else { rng.gen_range(0..world.items.len()) };
                            tries += 1;
                        }
                        if Some(it) == tail {
                            it = (it + 1) % world.items.len();
                        }
                        it
                    }
                }
            };
            let paired = tail.is_some() && Some(item) == tail && prev.is_some_and(|(_, pts, _)| ts < pts + 3600);
            if !paired {
                slot_idx += 1;
                if slot_idx == p.slots.len() {
                    slot_idx = 0;
                    day += 1 + rng.gen_range(0..2u64);
                }
            }
            let it = &world.items[item];
            let mut attributes = BTreeMap::new();
            attributes.insert("category".into(), format!("cat{}", it.category));
            attributes.insert("brand".into(), format!("brand{}", it.brand));
            attributes.insert("aoi".into(), format!("aoi{}", it.region));
            attributes.insert("user_aoi".into(), format!("aoi{region}"));
            events.push(PurchaseEvent {
                user_id: user_key.clone(),
                takeaway_id: it.key.clone(),
                timestamp: ts,
                user_geohash6: world.regions[region],
                shop_geohash6: world.regions[it.region],
                attributes,
            });
            prev = Some((item, ts, region));
        }
    }

    let pairs = world
        .pair_tail
        .iter()
        .enumerate()
        .filter_map(|(a, b)| b.map(|b| (world.items[a].key.clone(), world.items[b].key.clone())))
        .collect();
    Ok(SyntheticData { events, pairs })
}
