//! Purchase events, vocabularies, per-user sequences and the synthetic
//! generator.

mod event;
pub mod geo;
mod ingest;
mod sequence;
mod synthetic;
mod vocab;

pub use event::{PurchaseEvent, RawEvent, USER_ATTRIBUTE_PREFIX};
pub use geo::{bucketize_distance, spherical_distance, DistanceBucket, Geohash6, LatLon, DISTANCE_BUCKETS};
pub use ingest::{ingest_events, IngestReport, Ingested};
pub use sequence::{build_sequences, training_prefix_len, user_ranges, Sequence, SequenceConfig, SequenceSet, Split};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData, SLOT_HOURS};
pub use vocab::{Registry, Vocab};
