//! Map-query preprocessing: deduplication, proximity filtering, travel-time
//! estimation and the sparse arrival-time tensor.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geo::{distance_m, Cell, GeoPoint, GridMap};
use crate::error::{Error, Result};

/// Queries by the same user within this many seconds collapse to the last one.
pub const DEDUP_WINDOW_S: i64 = 600;
/// Queries whose current location is this far (or farther) from the start are dropped.
pub const PROXIMITY_LIMIT_M: f64 = 2000.0;
/// Default tensor bin width (15 minutes).
pub const BIN_SECONDS: i64 = 900;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    LocationSearch,
    RouteCar,
    RouteBus,
    RouteBike,
    RouteWalk,
}

impl QueryMode {
    pub const ALL: [QueryMode; 5] = [
        QueryMode::LocationSearch,
        QueryMode::RouteCar,
        QueryMode::RouteBus,
        QueryMode::RouteBike,
        QueryMode::RouteWalk,
    ];

    /// Travel speed in km/h used to estimate arrival for a trip of
    /// `distance_m` meters.
    pub fn speed_kmh(self, distance_m: f64) -> f64 {
        match self {
            QueryMode::RouteCar => 30.0,
            QueryMode::RouteBus => 20.0,
            QueryMode::RouteBike => 10.0,
            QueryMode::RouteWalk => 3.6,
            QueryMode::LocationSearch if distance_m > PROXIMITY_LIMIT_M => 20.0,
            QueryMode::LocationSearch => 3.6,
        }
    }
}

pub(crate) fn kmh_to_mps(v: f64) -> f64 {
    v / 3.6
}

/// One map search record as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawQuery {
    pub user_id: String,
    pub search_ts: i64,
    pub cur: GeoPoint,
    pub start: GeoPoint,
    pub dest: GeoPoint,
    pub start_word: String,
    pub dest_word: String,
    pub mode: QueryMode,
}

/// A filtered query with estimated start and arrival times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub t_s: f64,
    pub t_d: f64,
    pub start_word: String,
    pub dest_word: String,
    pub start: GeoPoint,
    pub dest: GeoPoint,
    /// `None` when the point falls outside the grid.
    pub cell_s: Option<Cell>,
    pub cell_d: Option<Cell>,
}

impl Query {
    /// Arrival bin relative to `t0`, or `None` outside `[t0, t0 + bin * bins)`.
    pub fn arrival_bin(&self, t0: i64, bin: i64, bins: usize) -> Option<usize> {
        time_bin(self.t_d, t0, bin, bins)
    }
}

pub(crate) fn time_bin(ts: f64, t0: i64, bin: i64, bins: usize) -> Option<usize> {
    let rel = ts - t0 as f64;
    if rel < 0.0 || !rel.is_finite() {
        return None;
    }
    let idx = (rel / bin as f64).floor() as usize;
    (idx < bins).then_some(idx)
}

/// Keeps only the last query of every burst a user issues within ten minutes.
///
/// The input must be sorted by `(user_id, search_ts)`; equal timestamps keep
/// their input order and the later one wins.
pub fn dedup(queries: &[RawQuery]) -> Result<Vec<RawQuery>> {
    for (i, w) in queries.windows(2).enumerate() {
        let ordered = (w[0].user_id.as_str(), w[0].search_ts) <= (w[1].user_id.as_str(), w[1].search_ts);
        if !ordered {
            return Err(Error::Precondition(format!(
                "queries not sorted by (user_id, search_ts) at index {}",
                i + 1
            )));
        }
    }
    let kept = queries
        .iter()
        .enumerate()
        .filter(|(i, q)| match queries.get(i + 1) {
            Some(next) if next.user_id == q.user_id => next.search_ts - q.search_ts > DEDUP_WINDOW_S,
            _ => true,
        })
        .map(|(_, q)| q.clone())
        .collect();
    Ok(kept)
}

/// Sorts by `(user_id, search_ts)`, stable on ties.
pub fn sort_for_dedup(queries: &mut [RawQuery]) {
    queries.sort_by(|a, b| (a.user_id.as_str(), a.search_ts).cmp(&(b.user_id.as_str(), b.search_ts)));
}

pub fn filter_proximity(queries: &[RawQuery]) -> Vec<RawQuery> {
    queries
        .iter()
        .filter(|q| distance_m(&q.cur, &q.start) < PROXIMITY_LIMIT_M)
        .cloned()
        .collect()
}

/// Estimates start and arrival time from straight-line distances.
pub fn estimate_times(q: &RawQuery, grid: &GridMap) -> Query {
    let start = match q.mode {
        QueryMode::LocationSearch => q.cur,
        _ => q.start,
    };
    let walk_m = distance_m(&q.cur, &start);
    let t_s = q.search_ts as f64 + walk_m / kmh_to_mps(3.6);
    let trip_m = distance_m(&start, &q.dest);
    let t_d = t_s + trip_m / kmh_to_mps(q.mode.speed_kmh(trip_m));
    Query {
        t_s,
        t_d,
        start_word: q.start_word.clone(),
        dest_word: q.dest_word.clone(),
        start,
        dest: q.dest,
        cell_s: grid.to_cell(&start).ok(),
        cell_d: grid.to_cell(&q.dest).ok(),
    }
}

/// Outcome of the full preprocessing chain.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub queries: Vec<Query>,
    pub raw_count: usize,
    pub after_dedup: usize,
    pub after_proximity: usize,
}

/// Sort, dedup, proximity filter and time estimation in one pass.
pub fn preprocess(mut raw: Vec<RawQuery>, grid: &GridMap) -> Result<Preprocessed> {
    let raw_count = raw.len();
    sort_for_dedup(&mut raw);
    let deduped = dedup(&raw)?;
    let after_dedup = deduped.len();
    let near = filter_proximity(&deduped);
    let after_proximity = near.len();
    let mut queries: Vec<Query> = near.iter().map(|q| estimate_times(q, grid)).collect();
    // Downstream consumers see queries in arrival order.
    queries.sort_by(|a, b| a.t_d.total_cmp(&b.t_d));
    Ok(Preprocessed {
        queries,
        raw_count,
        after_dedup,
        after_proximity,
    })
}

/// Sparse counts of estimated arrivals per grid cell and time bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalTimeTensor {
    pub grid: GridMap,
    pub t0: i64,
    pub bin: i64,
    pub bins: usize,
    entries: BTreeMap<(u32, u32, u32), u32>,
    /// Queries that fell outside the grid or the time range.
    pub skipped: usize,
}

impl ArrivalTimeTensor {
    pub fn empty(grid: GridMap, t0: i64, bin: i64, bins: usize) -> Self {
        ArrivalTimeTensor {
            grid,
            t0,
            bin,
            bins,
            entries: BTreeMap::new(),
            skipped: 0,
        }
    }

    /// Builds from explicit `(x, y, t, count)` entries; zero counts are ignored.
    pub fn from_entries(
        grid: GridMap,
        t0: i64,
        bin: i64,
        bins: usize,
        entries: impl IntoIterator<Item = (u32, u32, u32, u32)>,
    ) -> Result<Self> {
        let mut tensor = Self::empty(grid, t0, bin, bins);
        for (x, y, t, count) in entries {
            if x >= grid.cols || y >= grid.rows || t as usize >= bins {
                return Err(Error::InvalidArgument(format!(
                    "tensor entry ({x}, {y}, {t}) outside {}x{}x{bins}",
                    grid.cols, grid.rows
                )));
            }
            if count > 0 {
                *tensor.entries.entry((x, y, t)).or_insert(0) += count;
            }
        }
        Ok(tensor)
    }

    pub fn get(&self, x: u32, y: u32, t: usize) -> u32 {
        self.entries.get(&(x, y, t as u32)).copied().unwrap_or(0)
    }

    /// Dense count series of one cell over all bins.
    pub fn cell_series(&self, cell: Cell) -> Vec<u32> {
        let mut out = vec![0; self.bins];
        for (&(_, _, t), &c) in self.entries.range((cell.x, cell.y, 0)..=(cell.x, cell.y, u32::MAX)) {
            out[t as usize] = c;
        }
        out
    }

    /// Cells holding at least one arrival, in `(x, y)` order.
    pub fn occupied_cells(&self) -> Vec<Cell> {
        let mut cells: Vec<Cell> = self.entries.keys().map(|&(x, y, _)| Cell::new(x, y)).collect();
        cells.dedup();
        cells
    }

    /// Non-zero entries as `(x, y, t, count)` in key order.
    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, u32, u32)> + '_ {
        self.entries.iter().map(|(&(x, y, t), &c)| (x, y, t, c))
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn total(&self) -> u64 {
        self.entries.values().map(|&c| c as u64).sum()
    }

    /// `N / (R * C * T)`.
    pub fn density(&self) -> f64 {
        let cells = self.grid.num_cells() * self.bins;
        if cells == 0 {
            0.0
        } else {
            self.total() as f64 / cells as f64
        }
    }
}

pub fn build_arrival_tensor(
    queries: &[Query],
    grid: &GridMap,
    t0: i64,
    bin: i64,
    bins: usize,
) -> ArrivalTimeTensor {
    let mut tensor = ArrivalTimeTensor::empty(*grid, t0, bin, bins);
    for q in queries {
        let Some(t) = q.arrival_bin(t0, bin, bins) else {
            tensor.skipped += 1;
            continue;
        };
        // Re-derive the cell so tensors built against a different grid stay consistent.
        match grid.to_cell(&q.dest) {
            Ok(c) => *tensor.entries.entry((c.x, c.y, t as u32)).or_insert(0) += 1,
            Err(_) => tensor.skipped += 1,
        }
    }
    tensor
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::EARTH_RADIUS_M;
    use proptest::prelude::*;

    fn raw(user: &str, ts: i64) -> RawQuery {
        let p = GeoPoint::new(116.4, 39.9);
        RawQuery {
            user_id: user.into(),
            search_ts: ts,
            cur: p,
            start: p,
            dest: GeoPoint::new(116.45, 39.92),
            start_word: "home".into(),
            dest_word: "gym".into(),
            mode: QueryMode::RouteCar,
        }
    }

    const TEN: i64 = 36_000;

    #[test]
    fn dedup_keeps_the_last_of_a_burst() {
        let qs = vec![raw("u", TEN), raw("u", TEN + 300), raw("u", TEN + 720)];
        let out = dedup(&qs).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].search_ts, TEN + 720);
    }

    #[test]
    fn dedup_keeps_queries_eleven_minutes_apart() {
        let qs = vec![raw("u", TEN), raw("u", TEN + 660)];
        assert_eq!(dedup(&qs).unwrap().len(), 2);
        assert_eq!(dedup(&qs[..1]).unwrap(), qs[..1].to_vec());
    }

    #[test]
    fn dedup_is_per_user_and_rejects_unsorted() {
        let qs = vec![raw("a", TEN), raw("b", TEN + 10)];
        assert_eq!(dedup(&qs).unwrap().len(), 2);
        let bad = vec![raw("a", TEN + 10), raw("a", TEN)];
        assert!(matches!(dedup(&bad), Err(Error::Precondition(_))));
    }

    #[test]
    fn proximity_boundary_is_exclusive() {
        let mut q = raw("u", 0);
        assert_eq!(filter_proximity(&[q.clone()]).len(), 1);
        // smallest latitude offset whose computed distance reaches 2000 m
        let mut lat = q.start.lat + (2000.0 / EARTH_RADIUS_M).to_degrees() - 1e-9;
        while distance_m(&GeoPoint::new(q.start.lon, lat), &q.start) < 2000.0 {
            lat = f64::from_bits(lat.to_bits() + 1);
        }
        q.cur = GeoPoint::new(q.start.lon, lat);
        assert!((distance_m(&q.cur, &q.start) - 2000.0).abs() < 1e-6);
        assert!(filter_proximity(&[q.clone()]).is_empty());
        q.cur = q.start.offset_m(0.0, 1999.0);
        assert_eq!(filter_proximity(&[q]).len(), 1);
    }

    #[test]
    fn car_trip_of_fifteen_km_takes_half_an_hour() {
        let grid = GridMap::default();
        let mut q = raw("u", 1000);
        q.dest = q.start.offset_m(0.0, 15_000.0);
        let trip = distance_m(&q.start, &q.dest);
        let est = estimate_times(&q, &grid);
        assert_eq!(est.t_s, 1000.0);
        assert!((est.t_d - est.t_s - 1800.0 * trip / 15_000.0).abs() < 1e-9);
        assert!((est.t_d - est.t_s - 1800.0).abs() < 0.01);
    }

    #[test]
    fn location_search_walks_short_trips() {
        let grid = GridMap::default();
        let mut q = raw("u", 0);
        q.mode = QueryMode::LocationSearch;
        q.start = GeoPoint::new(0.0, 0.0); // ignored: start is the current location
        q.dest = q.cur.offset_m(1000.0, 0.0);
        let est = estimate_times(&q, &grid);
        assert_eq!(est.start, q.cur);
        assert!((est.t_d - est.t_s - 1000.0).abs() < 0.01);
        q.dest = q.cur.offset_m(3000.0, 0.0);
        let est = estimate_times(&q, &grid);
        assert!((est.t_d - est.t_s - 3000.0 / (20.0 / 3.6)).abs() < 0.1);
    }

    #[test]
    fn walk_time_delays_start() {
        let grid = GridMap::default();
        let mut q = raw("u", 0);
        q.cur = q.start.offset_m(500.0, 0.0);
        let est = estimate_times(&q, &grid);
        assert!((est.t_s - 500.0).abs() < 0.01);
    }

    fn at(dest: GeoPoint, t_d: f64, grid: &GridMap) -> Query {
        Query {
            t_s: t_d - 100.0,
            t_d,
            start_word: String::new(),
            dest_word: String::new(),
            start: dest,
            dest,
            cell_s: grid.to_cell(&dest).ok(),
            cell_d: grid.to_cell(&dest).ok(),
        }
    }

    #[test]
    fn tensor_counts_and_skips() {
        let grid = GridMap::default();
        let p = GeoPoint::new(116.4, 39.9);
        let empty = build_arrival_tensor(&[], &grid, 0, 900, 10);
        assert_eq!(empty.nnz(), 0);
        assert_eq!(empty.density(), 0.0);
        let qs = vec![
            at(p, 1000.0, &grid),
            at(p, 1100.0, &grid),
            at(p, 1799.0, &grid),
            at(p, 9000.0, &grid),
            at(GeoPoint::new(100.0, 10.0), 1000.0, &grid),
        ];
        let t = build_arrival_tensor(&qs, &grid, 0, 900, 10);
        let c = grid.to_cell(&p).unwrap();
        assert_eq!(t.get(c.x, c.y, 1), 3);
        assert_eq!(t.skipped, 2);
        assert_eq!(t.total() as usize + t.skipped, qs.len());
    }

    proptest! {
        #[test]
        fn dedup_and_filter_are_idempotent(stamps in proptest::collection::vec((0u8..3, 0i64..5000), 0..40)) {
            let mut qs: Vec<RawQuery> = stamps
                .iter()
                .enumerate()
                .map(|(i, &(u, ts))| {
                    let mut q = raw(&format!("u{u}"), ts);
                    q.cur = q.start.offset_m((i % 5) as f64 * 600.0, 0.0);
                    q
                })
                .collect();
            sort_for_dedup(&mut qs);
            let once = filter_proximity(&dedup(&qs).unwrap());
            let twice = filter_proximity(&dedup(&once).unwrap());
            prop_assert_eq!(&once, &twice);
        }

        #[test]
        fn counts_conserved(times in proptest::collection::vec(-1000.0f64..12_000.0, 0..60)) {
            let grid = GridMap::default();
            let p = GeoPoint::new(116.4, 39.9);
            let qs: Vec<Query> = times.iter().map(|&t| at(p, t, &grid)).collect();
            let t = build_arrival_tensor(&qs, &grid, 0, 900, 12);
            prop_assert_eq!(t.total() as usize + t.skipped, qs.len());
        }

        // Route modes only: location search switches from walking to bus at 2 km.
        #[test]
        fn travel_time_monotone_in_distance(d1 in 0.0f64..30_000.0, d2 in 0.0f64..30_000.0, m in 1usize..5) {
            let grid = GridMap::default();
            let mut q = raw("u", 0);
            q.mode = QueryMode::ALL[m];
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            q.dest = q.cur.offset_m(lo, 0.0);
            let a = estimate_times(&q, &grid);
            q.dest = q.cur.offset_m(hi, 0.0);
            let b = estimate_times(&q, &grid);
            prop_assert!(b.t_d - b.t_s >= a.t_d - a.t_s);
        }
    }
}
