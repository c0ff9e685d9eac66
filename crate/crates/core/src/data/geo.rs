//! Geohash cells, great-circle distance and distance buckets.

use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

const BASE32: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";

pub const EARTH_RADIUS_KM: f64 = 6371.0;

fn decode_char(c: u8) -> Option<u8> {
    BASE32.iter().position(|&b| b == c).map(|p| p as u8)
}

/// A validated six-character geohash.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Geohash6([u8; 6]);

impl Geohash6 {
    pub fn parse(code: &str) -> Result<Self> {
        let bytes = code.as_bytes();
        if bytes.len() != 6 {
            return Err(Error::Geohash { position: bytes.len().min(6), reason: "expected exactly 6 characters" });
        }
        let mut out = [0u8; 6];
        for (i, &b) in bytes.iter().enumerate() {
            if decode_char(b).is_none() {
                return Err(Error::Geohash { position: i, reason: "character outside the geohash alphabet" });
            }
            out[i] = b;
        }
        Ok(Self(out))
    }

    pub fn as_str(&self) -> &str {
        core::str::from_utf8(&self.0).expect("alphabet is ascii")
    }

    /// `(lat_min, lat_max, lon_min, lon_max)` of the cell.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        decode_bounds(&self.0)
    }

    /// Center of the cell as `(lat, lon)` degrees.
    pub fn centroid(&self) -> LatLon {
        let (lat0, lat1, lon0, lon1) = self.bounds();
        LatLon { lat: (lat0 + lat1) / 2.0, lon: (lon0 + lon1) / 2.0 }
    }

    pub fn encode(point: LatLon) -> Result<Self> {
        point.validate()?;
        let code = encode(point, 6);
        Self::parse(&code)
    }
}

impl fmt::Debug for Geohash6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Geohash6({})", self.as_str())
    }
}

impl fmt::Display for Geohash6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Geohash6 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl Serialize for Geohash6 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Geohash6 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Decodes the centre of a geohash cell. Convenience for string input.
pub fn geohash6_centroid(code: &str) -> Result<LatLon> {
    Ok(Geohash6::parse(code)?.centroid())
}

fn decode_bounds(code: &[u8]) -> (f64, f64, f64, f64) {
    let (mut lat0, mut lat1) = (-90.0, 90.0);
    let (mut lon0, mut lon1) = (-180.0, 180.0);
    let mut even = true;
    for &c in code {
        let v = decode_char(c).expect("validated");
        for bit in (0..5).rev() {
            let on = (v >> bit) & 1 == 1;
            if even {
                let mid = (lon0 + lon1) / 2.0;
                if on {
                    lon0 = mid;
                } else {
                    lon1 = mid;
                }
            } else {
                let mid = (lat0 + lat1) / 2.0;
                if on {
                    lat0 = mid;
                } else {
                    lat1 = mid;
                }
            }
            even = !even;
        }
    }
    (lat0, lat1, lon0, lon1)
}

/// Standard interleaved base-32 encoding at the given precision.
pub fn encode(point: LatLon, precision: usize) -> String {
    let (mut lat0, mut lat1) = (-90.0, 90.0);
    let (mut lon0, mut lon1) = (-180.0, 180.0);
    let mut out = String::with_capacity(precision);
    let mut even = true;
    let mut ch = 0u8;
    let mut bits = 0;
    while out.len() < precision {
        let on = if even {
            let mid = (lon0 + lon1) / 2.0;
            if point.lon >= mid {
                lon0 = mid;
                true
            } else {
                lon1 = mid;
                false
            }
        } else {
            let mid = (lat0 + lat1) / 2.0;
            if point.lat >= mid {
                lat0 = mid;
                true
            } else {
                lat1 = mid;
                false
            }
        };
        ch = (ch << 1) | on as u8;
        bits += 1;
        even = !even;
        if bits == 5 {
            out.push(BASE32[ch as usize] as char);
            ch = 0;
            bits = 0;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = Self { lat, lon };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::invalid(alloc::format!("coordinates out of range: ({}, {})", self.lat, self.lon)));
        }
        Ok(())
    }
}

/// Haversine great-circle distance in kilometres.
pub fn spherical_distance(a: LatLon, b: LatLon) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let rad = core::f64::consts::PI / 180.0;
    let (p1, p2) = (a.lat * rad, b.lat * rad);
    let dp = p2 - p1;
    let dl = (b.lon - a.lon) * rad;
    let s1 = math::sin(dp / 2.0);
    let s2 = math::sin(dl / 2.0);
    let h = s1 * s1 + math::cos(p1) * math::cos(p2) * s2 * s2;
    Ok(2.0 * EARTH_RADIUS_KM * math::asin(math::sqrt(h.min(1.0))))
}

/// Number of distance buckets.
pub const DISTANCE_BUCKETS: usize = 16;

/// Lower edges of buckets 1..16 in km: 0.25 doubling to 4096. Bucket 0 is
/// `[0, 0.25)`, bucket `i` is `[EDGES[i-1], EDGES[i])` and bucket 15 is open
/// ended.
pub const DISTANCE_EDGES_KM: [f64; DISTANCE_BUCKETS - 1] =
    [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0, 2048.0, 4096.0];

/// Log2-spaced distance bucket, `0..16`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DistanceBucket(u8);

impl DistanceBucket {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Token used in sequences and embedding tables; 0 is padding.
    pub fn token(self) -> u32 {
        self.0 as u32 + 1
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < DISTANCE_BUCKETS).then_some(Self(i as u8))
    }
}

pub fn bucketize_distance(km: f64) -> Result<DistanceBucket> {
    if !(km >= 0.0) {
        return Err(Error::invalid(alloc::format!("distance must be non-negative, got {km}")));
    }
    let b = DISTANCE_EDGES_KM.iter().take_while(|&&e| km >= e).count();
    Ok(DistanceBucket(b as u8))
}
