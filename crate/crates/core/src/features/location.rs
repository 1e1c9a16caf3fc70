//! Grid-snap place clustering, haversine distance and location entropy.

use serde::{Deserialize, Serialize};

use crate::event::{EventBody, SensorEvent};
use crate::time::{Timestamp, UtcOffset, HOUR_MS, MINUTE_MS};

/// Grid cell edge, meters.
pub const CELL_SIZE_M: f64 = 100.0;
/// Minimum dwell for a cell to count as a visited place.
pub const MIN_DWELL_MS: i64 = 5 * MINUTE_MS;
/// Local hours whose dwell time decides the home cell.
pub const HOME_HOURS: (f64, f64) = (0.0, 6.0);

const EARTH_RADIUS_M: f64 = 6_371_008.8;
const METERS_PER_DEGREE: f64 = 111_320.0;

/// A ~100 m grid cell. Longitude spacing is scaled by the cosine of the
/// point's latitude so cells stay roughly square away from the equator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: i64,
    pub col: i64,
}

pub fn cell_of(latitude: f64, longitude: f64) -> Cell {
    let y = latitude * METERS_PER_DEGREE;
    let x = longitude * METERS_PER_DEGREE * latitude.to_radians().cos();
    Cell {
        row: (y / CELL_SIZE_M).floor() as i64,
        col: (x / CELL_SIZE_M).floor() as i64,
    }
}

/// Great-circle distance in meters.
pub fn haversine_m(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Shannon entropy (nats) of the time distribution over places.
///
/// Returns `None` when no place holds positive time, or when any duration is
/// negative or non-finite.
pub fn location_entropy(place_durations: &[f64]) -> Option<f64> {
    if place_durations.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return None;
    }
    let total: f64 = place_durations.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let h = place_durations
        .iter()
        .filter(|&&d| d > 0.0)
        .map(|&d| {
            let p = d / total;
            -p * p.ln()
        })
        .sum::<f64>();
    Some(h.max(0.0))
}

/// A location fix with the time it is taken to represent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fix {
    pub ts: Timestamp,
    pub lat: f64,
    pub lon: f64,
    pub cell: Cell,
    /// Milliseconds until the next fix (or the horizon end), capped.
    pub dwell_ms: i64,
}

/// Location fixes from time-ordered events, each holding until the next fix
/// but at most `cap_ms`, and never past `end`.
pub fn fixes(events: &[SensorEvent], end: Timestamp, cap_ms: i64) -> Vec<Fix> {
    let mut out: Vec<Fix> = Vec::new();
    for e in events {
        if let EventBody::LocationSample {
            latitude,
            longitude,
        } = e.body
        {
            if let Some(prev) = out.last_mut() {
                prev.dwell_ms = (e.timestamp - prev.ts).min(cap_ms);
            }
            out.push(Fix {
                ts: e.timestamp,
                lat: latitude,
                lon: longitude,
                cell: cell_of(latitude, longitude),
                dwell_ms: 0,
            });
        }
    }
    if let Some(last) = out.last_mut() {
        last.dwell_ms = (end - last.ts).clamp(0, cap_ms);
    }
    out
}

/// The cell with the most dwell time inside local `[00:00, 06:00)`, ties by
/// smallest cell. Dwell intervals are clipped to the night hours.
pub fn infer_home(events: &[SensorEvent], offset: UtcOffset, cap_ms: i64) -> Option<Cell> {
    let end = events.last().map(|e| e.timestamp)?;
    let mut dwell: std::collections::BTreeMap<Cell, i64> = Default::default();
    for f in fixes(events, end, cap_ms) {
        let midnight = offset.local_midnight(f.ts);
        let lo = midnight + (HOME_HOURS.0 * HOUR_MS as f64) as i64;
        let hi = midnight + (HOME_HOURS.1 * HOUR_MS as f64) as i64;
        let start = f.ts.max(lo);
        let stop = (f.ts + f.dwell_ms).min(hi);
        if stop > start {
            *dwell.entry(f.cell).or_default() += stop - start;
        }
    }
    dwell
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::UserId;

    #[test]
    fn entropy_examples() {
        assert_eq!(location_entropy(&[3600.0]), Some(0.0));
        let two = location_entropy(&[1800.0, 1800.0]).unwrap();
        assert!((two - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(location_entropy(&[0.0, 0.0]), None);
        assert_eq!(location_entropy(&[]), None);
        assert_eq!(location_entropy(&[-1.0, 2.0]), None);
    }

    #[test]
    fn haversine_known_distance() {
        // One degree of latitude is about 111.2 km.
        let d = haversine_m((0.0, 0.0), (1.0, 0.0));
        assert!((d - 111_195.0).abs() < 10.0, "{d}");
        assert_eq!(haversine_m((37.5, 127.0), (37.5, 127.0)), 0.0);
    }

    #[test]
    fn nearby_points_share_a_cell() {
        let a = cell_of(37.50001, 127.00001);
        let b = cell_of(37.50002, 127.00002);
        assert_eq!(a, b);
        assert_ne!(a, cell_of(37.51, 127.0));
    }

    #[test]
    fn home_is_the_night_cell() {
        let u = UserId::new("u");
        let loc = |ts, lat| {
            SensorEvent::new(
                u.clone(),
                ts,
                EventBody::LocationSample {
                    latitude: lat,
                    longitude: 127.0,
                },
            )
        };
        let mut events = Vec::new();
        // Night at 37.50, day at 37.60.
        for m in (0..6 * 60).step_by(10) {
            events.push(loc(m * MINUTE_MS, 37.50));
        }
        for m in (6 * 60..20 * 60).step_by(10) {
            events.push(loc(m * MINUTE_MS, 37.60));
        }
        let home = infer_home(&events, UtcOffset::UTC, 15 * MINUTE_MS).unwrap();
        assert_eq!(home, cell_of(37.50, 127.0));
    }
}
