//! Event discovery on the arrival-time tensor.
//!
//! A *moment* is a `(cell, bin)` whose count beats the same bin one week
//! earlier both absolutely (by more than `zeta`) and relatively (by more than
//! `eta`), with a non-zero count last week. An *event* is a maximal run of
//! moments `[t_s, t_d]` in one cell with `t_d - t_s > epsilon`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::Cell;
use crate::query::{ArrivalTimeTensor, Query};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventParams {
    /// Relative growth threshold.
    pub eta: f64,
    /// Absolute growth threshold in queries per bin.
    pub zeta: f64,
    /// Comparison lag in bins (one week of 15-minute bins by default).
    pub delta_t: usize,
    /// Minimum span `t_d - t_s` must exceed, in bins.
    pub epsilon: usize,
}

impl Default for EventParams {
    fn default() -> Self {
        EventParams {
            eta: 0.2,
            zeta: 300.0,
            delta_t: 672,
            epsilon: 4,
        }
    }
}

impl EventParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.zeta > 0.0 && self.delta_t >= 1 && self.epsilon >= 1) {
            return Err(Error::InvalidArgument(format!("invalid event parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub x: u32,
    pub y: u32,
    pub t_s: usize,
    pub t_d: usize,
    pub qc_cur: u64,
    pub qc_last: u64,
    pub top_word: String,
    pub top_word_count: u64,
}

impl EventRecord {
    pub fn cell(&self) -> Cell {
        Cell::new(self.x, self.y)
    }

    /// Number of bins covered, both ends inclusive.
    pub fn span(&self) -> usize {
        self.t_d - self.t_s + 1
    }

    pub fn contains_bin(&self, t: usize) -> bool {
        (self.t_s..=self.t_d).contains(&t)
    }
}

fn moment_rule(now: u32, last_week: u32, p: &EventParams) -> bool {
    if last_week == 0 {
        return false;
    }
    let diff = now as f64 - last_week as f64;
    diff > p.zeta && diff / last_week as f64 > p.eta
}

pub fn is_moment(d: &ArrivalTimeTensor, x: u32, y: u32, t: usize, p: &EventParams) -> Result<bool> {
    if t < p.delta_t {
        return Err(Error::Precondition(format!(
            "moment undefined at bin {t} < lag {}",
            p.delta_t
        )));
    }
    Ok(moment_rule(d.get(x, y, t), d.get(x, y, t - p.delta_t), p))
}

/// Moment flags for one cell; bins before the lag are never moments.
fn moment_flags(series: &[u32], p: &EventParams) -> Vec<bool> {
    (0..series.len())
        .map(|t| t >= p.delta_t && moment_rule(series[t], series[t - p.delta_t], p))
        .collect()
}

/// Finds all events, ordered by `(y, x, t_s)`.
///
/// `queries` supply the destination words; pass an empty slice when only the
/// counts are of interest.
pub fn discover_events(d: &ArrivalTimeTensor, p: &EventParams, queries: &[Query]) -> Vec<EventRecord> {
    let mut cells = d.occupied_cells();
    cells.sort_by_key(|c| (c.y, c.x));
    let mut events = Vec::new();
    for cell in cells {
        let series = d.cell_series(cell);
        let flags = moment_flags(&series, p);
        let mut t = 0;
        while t < flags.len() {
            if !flags[t] {
                t += 1;
                continue;
            }
            let start = t;
            while t + 1 < flags.len() && flags[t + 1] {
                t += 1;
            }
            let end = t;
            if end - start > p.epsilon {
                let qc_cur = series[start..=end].iter().map(|&c| c as u64).sum();
                let qc_last = series[start - p.delta_t..=end - p.delta_t]
                    .iter()
                    .map(|&c| c as u64)
                    .sum();
                events.push(EventRecord {
                    x: cell.x,
                    y: cell.y,
                    t_s: start,
                    t_d: end,
                    qc_cur,
                    qc_last,
                    top_word: String::new(),
                    top_word_count: 0,
                });
            }
            t += 1;
        }
    }
    attach_top_words(&mut events, d, queries);
    events
}

fn attach_top_words(events: &mut [EventRecord], d: &ArrivalTimeTensor, queries: &[Query]) {
    if events.is_empty() || queries.is_empty() {
        return;
    }
    let mut by_cell: HashMap<Cell, Vec<usize>> = HashMap::new();
    for (i, e) in events.iter().enumerate() {
        by_cell.entry(e.cell()).or_default().push(i);
    }
    let mut counts: Vec<HashMap<&str, u64>> = vec![HashMap::new(); events.len()];
    for q in queries {
        let (Some(cell), Some(t)) = (q.cell_d, q.arrival_bin(d.t0, d.bin, d.bins)) else {
            continue;
        };
        if let Some(idx) = by_cell.get(&cell) {
            for &i in idx {
                if events[i].contains_bin(t) {
                    *counts[i].entry(q.dest_word.as_str()).or_insert(0) += 1;
                }
            }
        }
    }
    for (e, words) in events.iter_mut().zip(counts) {
        // highest count first, then lexicographically smallest word
        if let Some((w, c)) = words
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        {
            e.top_word = w.to_string();
            e.top_word_count = c;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventStats {
    pub events: usize,
    pub event_queries: u64,
    pub event_bins: u64,
    /// Queries per event bin; 0 when there are no events.
    pub density: f64,
}

pub fn event_stats(events: &[EventRecord], d: &ArrivalTimeTensor) -> EventStats {
    let mut total = 0u64;
    let mut bins = 0u64;
    for e in events {
        total += (e.t_s..=e.t_d).map(|t| d.get(e.x, e.y, t) as u64).sum::<u64>();
        bins += e.span() as u64;
    }
    EventStats {
        events: events.len(),
        event_queries: total,
        event_bins: bins,
        density: if bins == 0 { 0.0 } else { total as f64 / bins as f64 },
    }
}

/// Groups events by cell; handy for mask construction.
pub fn events_by_cell(events: &[EventRecord]) -> BTreeMap<Cell, Vec<&EventRecord>> {
    let mut map: BTreeMap<Cell, Vec<&EventRecord>> = BTreeMap::new();
    for e in events {
        map.entry(e.cell()).or_default().push(e);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GeoPoint, GridMap};

    fn small_grid() -> GridMap {
        GridMap::new([0.0, 0.0, 1.0, 1.0], 4, 4).unwrap()
    }

    fn params() -> EventParams {
        EventParams {
            eta: 0.2,
            zeta: 300.0,
            delta_t: 8,
            epsilon: 4,
        }
    }

    #[test]
    fn moment_examples() {
        let p = EventParams::default();
        let g = small_grid();
        let d = ArrivalTimeTensor::from_entries(g, 0, 900, 700, [(1, 1, 2, 400), (1, 1, 674, 800)]).unwrap();
        assert!(is_moment(&d, 1, 1, 674, &p).unwrap());
        assert!(!is_moment(&d, 1, 1, 675, &p).unwrap());
        assert!(is_moment(&d, 1, 1, 5, &p).is_err());
        let d = ArrivalTimeTensor::from_entries(g, 0, 900, 700, [(1, 1, 2, 2000), (1, 1, 674, 2350)]).unwrap();
        assert!(!is_moment(&d, 1, 1, 674, &p).unwrap());
    }

    #[test]
    fn zero_tensor_has_no_events() {
        let d = ArrivalTimeTensor::empty(small_grid(), 0, 900, 64);
        assert!(discover_events(&d, &params(), &[]).is_empty());
    }

    #[test]
    fn six_moment_run_is_one_event() {
        let mut entries: Vec<(u32, u32, u32, u32)> = (0..64).map(|t| (2, 1, t, 10)).collect();
        for t in 20..26 {
            entries[t as usize].3 = 500;
        }
        let d = ArrivalTimeTensor::from_entries(small_grid(), 0, 900, 64, entries).unwrap();
        let ev = discover_events(&d, &params(), &[]);
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].t_s, ev[0].t_d), (20, 25));
        assert_eq!(ev[0].qc_cur, 3000);
        assert_eq!(ev[0].qc_last, 60);
        // five moments give t_d - t_s = 4, which does not exceed epsilon
        let five = {
            let mut e: Vec<(u32, u32, u32, u32)> = (0..64).map(|t| (2, 1, t, 10)).collect();
            for t in 20..25 {
                e[t as usize].3 = 500;
            }
            ArrivalTimeTensor::from_entries(small_grid(), 0, 900, 64, e).unwrap()
        };
        assert!(discover_events(&five, &params(), &[]).is_empty());
    }

    #[test]
    fn top_word_tie_breaks_lexicographically() {
        let g = small_grid();
        let mut entries: Vec<(u32, u32, u32, u32)> = (0..32).map(|t| (0, 0, t, 1)).collect();
        for t in 10..16 {
            entries[t as usize].3 = 400;
        }
        let d = ArrivalTimeTensor::from_entries(g, 0, 900, 32, entries).unwrap();
        let dest = g.cell_center(Cell::new(0, 0));
        let q = |w: &str, bin: usize| Query {
            t_s: 0.0,
            t_d: bin as f64 * 900.0 + 10.0,
            start_word: String::new(),
            dest_word: w.into(),
            start: GeoPoint::new(0.9, 0.9),
            dest,
            cell_s: None,
            cell_d: Some(Cell::new(0, 0)),
        };
        let qs = vec![q("zoo", 10), q("arena", 11), q("zoo", 12), q("arena", 15), q("park", 20)];
        let ev = discover_events(&d, &params(), &qs);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].top_word, "arena");
        assert_eq!(ev[0].top_word_count, 2);
    }

    #[test]
    fn stats() {
        let d = ArrivalTimeTensor::from_entries(small_grid(), 0, 900, 16, [(0, 0, 3, 300), (0, 0, 4, 400)]).unwrap();
        let none = event_stats(&[], &d);
        assert_eq!((none.event_queries, none.event_bins, none.density), (0, 0, 0.0));
        let e = EventRecord {
            x: 0,
            y: 0,
            t_s: 3,
            t_d: 4,
            qc_cur: 700,
            qc_last: 0,
            top_word: String::new(),
            top_word_count: 0,
        };
        let s = event_stats(&[e], &d);
        assert_eq!((s.event_queries, s.event_bins, s.density), (700, 2, 350.0));
    }

    #[test]
    fn full_scale_event_density() {
        let rho: f64 = 2_336_114.0 / 15_892.0;
        assert_eq!(rho.round(), 147.0);
    }
}
