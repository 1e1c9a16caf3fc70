//! UTC timestamps and per-user local-day arithmetic.
//!
//! All timestamps are milliseconds since the Unix epoch (UTC). Each user
//! carries a fixed UTC offset used for local midnight, local hour and local
//! date computations.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

/// Milliseconds since the Unix epoch, UTC.
pub type Timestamp = i64;

pub const SECOND_MS: i64 = 1_000;
pub const MINUTE_MS: i64 = 60 * SECOND_MS;
pub const HOUR_MS: i64 = 60 * MINUTE_MS;
pub const DAY_MS: i64 = 24 * HOUR_MS;

/// Fixed offset from UTC, in minutes (e.g. `+540` for UTC+9).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UtcOffset(pub i32);

impl UtcOffset {
    pub const UTC: UtcOffset = UtcOffset(0);

    pub fn offset_ms(self) -> i64 {
        i64::from(self.0) * MINUTE_MS
    }

    pub fn to_local_ms(self, ts: Timestamp) -> i64 {
        ts + self.offset_ms()
    }

    /// Local day number (days since 1970-01-01 in local time).
    pub fn local_day(self, ts: Timestamp) -> i64 {
        self.to_local_ms(ts).div_euclid(DAY_MS)
    }

    /// UTC timestamp of the local midnight that starts the day containing `ts`.
    pub fn local_midnight(self, ts: Timestamp) -> Timestamp {
        self.local_day(ts) * DAY_MS - self.offset_ms()
    }

    /// UTC timestamp of local midnight for a local day number.
    pub fn midnight_of_day(self, day: i64) -> Timestamp {
        day * DAY_MS - self.offset_ms()
    }

    /// Fractional local hour of day in `[0, 24)`.
    pub fn local_hour(self, ts: Timestamp) -> f64 {
        self.to_local_ms(ts).rem_euclid(DAY_MS) as f64 / HOUR_MS as f64
    }

    /// Minutes elapsed since local midnight.
    pub fn minutes_since_midnight(self, ts: Timestamp) -> f64 {
        self.to_local_ms(ts).rem_euclid(DAY_MS) as f64 / MINUTE_MS as f64
    }

    pub fn local_date(self, ts: Timestamp) -> NaiveDate {
        date_from_day(self.local_day(ts))
    }

    pub fn midnight_of(self, date: NaiveDate) -> Timestamp {
        self.midnight_of_day(day_of_date(date))
    }
}

/// Local day number of a calendar date.
pub fn day_of_date(date: NaiveDate) -> i64 {
    // 719_163 = days from 0001-01-01 (CE day 1) to 1970-01-01.
    i64::from(date.num_days_from_ce()) - 719_163
}

pub fn date_from_day(day: i64) -> NaiveDate {
    NaiveDate::from_num_days_from_ce_opt((day + 719_163) as i32).expect("date within chrono range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn day_round_trip() {
        let d = NaiveDate::from_ymd_opt(2024, 3, 1).unwrap();
        assert_eq!(date_from_day(day_of_date(d)), d);
        assert_eq!(day_of_date(NaiveDate::from_ymd_opt(1970, 1, 1).unwrap()), 0);
    }

    #[test]
    fn offset_moves_midnight() {
        let kst = UtcOffset(540);
        // 2024-03-01T15:00:00Z is 2024-03-02T00:00 in UTC+9.
        let d = NaiveDate::from_ymd_opt(2024, 3, 2).unwrap();
        let midnight = kst.midnight_of(d);
        assert_eq!(kst.local_hour(midnight), 0.0);
        assert_eq!(kst.local_date(midnight), d);
        assert_eq!(kst.local_date(midnight - 1), d.pred_opt().unwrap());
        assert_eq!(kst.local_midnight(midnight + 5 * HOUR_MS), midnight);
    }

    #[test]
    fn negative_offsets_and_pre_epoch() {
        let pst = UtcOffset(-480);
        assert_eq!(pst.local_day(0), -1);
        assert!((pst.local_hour(0) - 16.0).abs() < 1e-12);
    }
}
