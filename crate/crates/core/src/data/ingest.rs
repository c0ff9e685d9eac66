use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::geo::Geohash6;
use super::{PurchaseEvent, RawEvent, Vocab};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub total: usize,
    pub malformed: usize,
    /// Records dropped for an empty or invalid geohash6.
    pub dropped_geohash: usize,
    pub retained: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    /// Grouped by user (dense id order), chronological within a user.
    pub events: Vec<PurchaseEvent>,
    pub vocab: Vocab,
    pub report: IngestReport,
}

/// Validates, cleans and orders a stream of parsed records. `Err` items are
/// lines the caller could not parse; they count as malformed.
pub fn ingest_events<E>(records: impl IntoIterator<Item = core::result::Result<RawEvent, E>>) -> Result<Ingested> {
    let mut report = IngestReport::default();
    let mut events = Vec::new();
    for rec in records {
        report.total += 1;
        let Ok(raw) = rec else {
            report.malformed += 1;
            continue;
        };
        if raw.timestamp <= 0 || raw.user_id.is_empty() || raw.takeaway_id.is_empty() {
            report.malformed += 1;
            continue;
        }
        let (Ok(user_geohash6), Ok(shop_geohash6)) =
            (Geohash6::parse(&raw.user_geohash6), Geohash6::parse(&raw.shop_geohash6))
        else {
            report.dropped_geohash += 1;
            continue;
        };
        events.push(PurchaseEvent {
            user_id: raw.user_id,
            takeaway_id: raw.takeaway_id,
            timestamp: raw.timestamp as u64,
            user_geohash6,
            shop_geohash6,
            attributes: raw.attributes,
        });
    }
    if report.total > 0 && report.malformed * 2 > report.total {
        return Err(Error::DataQuality { malformed: report.malformed, total: report.total });
    }
    let vocab = Vocab::from_events(&events);
    // stable: ties keep input order
    events.sort_by_key(|e| (vocab.users.id(&e.user_id), e.timestamp));
    report.retained = events.len();
    Ok(Ingested { events, vocab, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::{String, ToString};
    use alloc::vec;

    fn raw(user: &str, item: &str, ts: i64, shop: &str) -> RawEvent {
        RawEvent {
            user_id: user.into(),
            takeaway_id: item.into(),
            timestamp: ts,
            user_geohash6: "wt3q2x".into(),
            shop_geohash6: shop.into(),
            ..Default::default()
        }
    }

    #[test]
    fn empty_input_gives_empty_vocab() {
        let out = ingest_events(Vec::<core::result::Result<RawEvent, ()>>::new()).unwrap();
        assert!(out.events.is_empty());
        assert_eq!(out.vocab.num_takeaways(), 0);
        assert_eq!(out.vocab.takeaways.key(0), None);
    }

    #[test]
    fn blank_geohash_is_dropped() {
        let recs: Vec<core::result::Result<RawEvent, ()>> =
            vec![Ok(raw("u1", "a", 10, "wt3q2y")), Ok(raw("u1", "b", 11, "")), Ok(raw("u2", "c", 12, "wt3q2z"))];
        let out = ingest_events(recs).unwrap();
        assert_eq!(out.events.len(), 2);
        assert_eq!(out.report.dropped_geohash, 1);
        assert_eq!(out.vocab.takeaways.id("b"), None);
    }

    #[test]
    fn mostly_malformed_input_is_rejected() {
        let recs: Vec<core::result::Result<RawEvent, String>> =
            vec![Err("bad".to_string()), Err("bad".to_string()), Ok(raw("u1", "a", 10, "wt3q2y"))];
        assert_eq!(ingest_events(recs), Err(Error::DataQuality { malformed: 2, total: 3 }));
        let recs: Vec<core::result::Result<RawEvent, String>> =
            vec![Ok(raw("u1", "a", 0, "wt3q2y")), Ok(raw("u1", "a", 10, "wt3q2y"))];
        assert_eq!(ingest_events(recs).unwrap().report.malformed, 1);
    }

    #[test]
    fn per_user_chronological_order_matches_sort_oracle() {
        let input = [
            ("u2", "x", 50),
            ("u1", "a", 30),
            ("u2", "y", 10),
            ("u1", "b", 10),
            ("u1", "c", 30),
            ("u2", "z", 40),
            ("u1", "d", 20),
            ("u2", "w", 10),
            ("u1", "e", 5),
            ("u2", "v", 60),
        ];
        let recs: Vec<core::result::Result<RawEvent, ()>> =
            input.iter().map(|&(u, i, t)| Ok(raw(u, i, t, "wt3q2y"))).collect();
        let out = ingest_events(recs).unwrap();
        // oracle: bucket by user in first-seen order, then insertion sort on
        // timestamp keeping input order for ties
        let mut expect: Vec<&str> = Vec::new();
        for user in ["u2", "u1"] {
            let mut rows: Vec<(i64, usize, &str)> =
                input.iter().enumerate().filter(|(_, r)| r.0 == user).map(|(k, r)| (r.2, k, r.1)).collect();
            for i in 1..rows.len() {
                let mut j = i;
                while j > 0 && rows[j - 1] > rows[j] {
                    rows.swap(j - 1, j);
                    j -= 1;
                }
            }
            expect.extend(rows.iter().map(|r| r.2));
        }
        let got: Vec<&str> = out.events.iter().map(|e| e.takeaway_id.as_str()).collect();
        assert_eq!(got, expect);
    }
}
