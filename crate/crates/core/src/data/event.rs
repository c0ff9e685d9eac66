use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use super::geo::Geohash6;

/// Fields of one input record before validation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub user_id: String,
    pub takeaway_id: String,
    pub timestamp: i64,
    pub user_geohash6: String,
    pub shop_geohash6: String,
    /// Extra named fields. Names starting with `user_` describe the user,
    /// everything else describes the takeaway.
    pub attributes: BTreeMap<String, String>,
}

/// One validated user-to-takeaway purchase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurchaseEvent {
    pub user_id: String,
    pub takeaway_id: String,
    /// Unix seconds, strictly positive.
    pub timestamp: u64,
    pub user_geohash6: Geohash6,
    pub shop_geohash6: Geohash6,
    pub attributes: BTreeMap<String, String>,
}

/// Prefix marking user-side attribute fields.
pub const USER_ATTRIBUTE_PREFIX: &str = "user_";

impl PurchaseEvent {
    pub fn to_raw(&self) -> RawEvent {
        RawEvent {
            user_id: self.user_id.clone(),
            takeaway_id: self.takeaway_id.clone(),
            timestamp: self.timestamp as i64,
            user_geohash6: self.user_geohash6.as_str().into(),
            shop_geohash6: self.shop_geohash6.as_str().into(),
            attributes: self.attributes.clone(),
        }
    }

    pub fn user_attributes(&self) -> impl Iterator<Item = (&str, &str)> {
        self.attributes
            .iter()
            .filter(|(k, _)| k.starts_with(USER_ATTRIBUTE_PREFIX))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn takeaway_attributes(&self) -> impl Iterator<Item = (&str, &str)> {
        self.attributes
            .iter()
            .filter(|(k, _)| !k.starts_with(USER_ATTRIBUTE_PREFIX))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }
}
