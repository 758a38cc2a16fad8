//! Wide attribute encoding for the decoder.
//!
//! Geographic layout (schema version 1, 25 values):
//!
//! | offset | width | field                                   |
//! |--------|-------|-----------------------------------------|
//! | 0      | 4     | width class one-hot (15, 30, 55, 130)   |
//! | 4      | 4     | direction one-hot (0, 1, 2, 3)          |
//! | 8      | 8     | speed class one-hot (1 ..= 8)           |
//! | 16     | 3     | lane class one-hot (1 ..= 3)            |
//! | 19     | 1     | `ln(1 + length_km)`                     |
//! | 20     | 5     | reserved, always zero                   |
//!
//! Social layout (6 values): weekday, weekend, holiday, peak, off-peak,
//! hour of day / 24. Peak means inside a peak window on a working day
//! (a weekday that is not a holiday).

use std::collections::BTreeSet;

use chrono::{DateTime, Datelike, FixedOffset, NaiveDate, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use super::{RoadSegment, WIDTH_CLASSES};
use crate::error::{Error, Result};

pub const GEO_SCHEMA_VERSION: u32 = 1;
pub const GEO_DIM: usize = 25;
pub const SOCIAL_DIM: usize = 6;

/// Holidays and peak windows in local time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calendar {
    pub holidays: BTreeSet<NaiveDate>,
    /// Half-open `[start, end)` windows in minutes after local midnight.
    pub peak_windows: Vec<(u32, u32)>,
    pub utc_offset_hours: i32,
}

impl Default for Calendar {
    /// Beijing time with the spring 2017 public holidays; peaks 07:00-09:00
    /// and 17:00-19:00.
    fn default() -> Self {
        let holidays = [
            (4, 2),
            (4, 3),
            (4, 4),
            (4, 29),
            (4, 30),
            (5, 1),
            (5, 28),
            (5, 29),
            (5, 30),
        ]
        .into_iter()
        .filter_map(|(m, d)| NaiveDate::from_ymd_opt(2017, m, d))
        .collect();
        Calendar {
            holidays,
            peak_windows: vec![(7 * 60, 9 * 60), (17 * 60, 19 * 60)],
            utc_offset_hours: 8,
        }
    }
}

impl Calendar {
    /// Calendar with no holidays, default peaks, UTC clock.
    pub fn plain() -> Self {
        Calendar {
            holidays: BTreeSet::new(),
            peak_windows: vec![(7 * 60, 9 * 60), (17 * 60, 19 * 60)],
            utc_offset_hours: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.utc_offset_hours.abs() > 14 {
            return Err(Error::Config(format!("utc offset {} out of range", self.utc_offset_hours)));
        }
        for &(a, b) in &self.peak_windows {
            if a >= b || b > 24 * 60 {
                return Err(Error::Config(format!("bad peak window [{a}, {b})")));
            }
        }
        Ok(())
    }

    pub fn local(&self, epoch_s: i64) -> Result<DateTime<FixedOffset>> {
        let offset = FixedOffset::east_opt(self.utc_offset_hours * 3600)
            .ok_or_else(|| Error::Config("invalid utc offset".into()))?;
        DateTime::from_timestamp(epoch_s, 0)
            .map(|t| t.with_timezone(&offset))
            .ok_or_else(|| Error::InvalidArgument(format!("timestamp {epoch_s} out of range")))
    }

    pub fn is_holiday(&self, epoch_s: i64) -> Result<bool> {
        Ok(self.holidays.contains(&self.local(epoch_s)?.date_naive()))
    }

    /// Weekend or holiday.
    pub fn is_rest_day(&self, epoch_s: i64) -> Result<bool> {
        let t = self.local(epoch_s)?;
        Ok(matches!(t.weekday(), Weekday::Sat | Weekday::Sun) || self.holidays.contains(&t.date_naive()))
    }

    pub fn is_peak(&self, epoch_s: i64) -> Result<bool> {
        if self.is_rest_day(epoch_s)? {
            return Ok(false);
        }
        let t = self.local(epoch_s)?;
        let minute = t.hour() * 60 + t.minute();
        Ok(self.peak_windows.iter().any(|&(a, b)| (a..b).contains(&minute)))
    }
}

fn one_hot(out: &mut [f64], pos: Option<usize>, what: &str, value: i64) -> Result<()> {
    let i = pos.ok_or_else(|| Error::InvalidArgument(format!("invalid {what} {value}")))?;
    out[i] = 1.0;
    Ok(())
}

pub fn encode_geo(seg: &RoadSegment) -> Result<Vec<f64>> {
    let mut v = vec![0.0; GEO_DIM];
    one_hot(
        &mut v[0..4],
        WIDTH_CLASSES.iter().position(|&w| w == seg.width_class),
        "width class",
        seg.width_class as i64,
    )?;
    one_hot(
        &mut v[4..8],
        (seg.direction <= 3).then_some(seg.direction as usize),
        "direction",
        seg.direction as i64,
    )?;
    one_hot(
        &mut v[8..16],
        (1..=8).contains(&seg.speed_class).then(|| seg.speed_class as usize - 1),
        "speed class",
        seg.speed_class as i64,
    )?;
    one_hot(
        &mut v[16..19],
        (1..=3).contains(&seg.lane_class).then(|| seg.lane_class as usize - 1),
        "lane class",
        seg.lane_class as i64,
    )?;
    if !(seg.length_km > 0.0 && seg.length_km.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid length {}", seg.length_km)));
    }
    v[19] = seg.length_km.ln_1p();
    Ok(v)
}

pub fn encode_social(epoch_s: i64, calendar: &Calendar) -> Result<[f64; SOCIAL_DIM]> {
    let t = calendar.local(epoch_s)?;
    let weekend = matches!(t.weekday(), Weekday::Sat | Weekday::Sun);
    let holiday = calendar.is_holiday(epoch_s)?;
    let peak = calendar.is_peak(epoch_s)?;
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    Ok([
        flag(!weekend),
        flag(weekend),
        flag(holiday),
        flag(peak),
        flag(!peak),
        t.hour() as f64 / 24.0,
    ])
}

/// Geographic and social vectors for one segment at one instant.
pub fn encode_attributes(seg: &RoadSegment, epoch_s: i64, calendar: &Calendar) -> Result<(Vec<f64>, [f64; SOCIAL_DIM])> {
    Ok((encode_geo(seg)?, encode_social(epoch_s, calendar)?))
}
