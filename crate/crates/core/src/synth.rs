//! Desk-scale synthetic worlds: a two-way street lattice with minute-level
//! speeds, crowd map queries and injected events.
//!
//! Speeds follow `v_free * daily(t) * weekly(t) * event(t) + noise`, where
//! `daily` is a sinusoid with its trough at 16:00 local time, `weekly` lifts
//! weekends, `event` multiplies by `1 - drop * ramp(t)` for segments whose
//! midpoint lies within 1 km of an event cell centre, and noise is AR(1) at
//! bin resolution (linearly interpolated across minutes) plus white minute
//! jitter. The ramp rises linearly over the first two bins of the event and
//! falls over the two bins after it.
//!
//! Queries are Poisson background arrivals in every cell covering the
//! lattice plus `query_volume` extra arrivals per bin in each event cell.
//! Search timestamps are back-computed from the arrival estimator in
//! [`crate::query`], so each generated query lands in its intended
//! `(cell, bin)`. Decoy queries that preprocessing must drop (earlier
//! searches of the same user, far-away current locations) are added on top.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{event_speed_correlation, EVENT_RADIUS_M};
use crate::events::{discover_events, EventParams, EventRecord};
use crate::geo::{distance_m, Cell, GeoPoint, GridMap};
use crate::network::{build_graph, RoadNetwork, RoadSegment};
use crate::query::{build_arrival_tensor, estimate_times, preprocess, QueryMode, RawQuery, BIN_SECONDS};
use crate::speed::{smooth_and_resample, SpeedSeries, RAW_STEP_S};

const MINUTES_PER_BIN: usize = (BIN_SECONDS / RAW_STEP_S) as usize;
const BINS_PER_DAY: usize = 96;
/// Event ramp length in bins, on each side.
const RAMP_BINS: f64 = 2.0;
const MIN_SPEED_KMH: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    /// South-west node.
    pub origin: GeoPoint,
    /// Nodes per row.
    pub cols: usize,
    /// Nodes per column.
    pub rows: usize,
    pub spacing_m: f64,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig {
            origin: GeoPoint::new(116.40, 39.90),
            cols: 7,
            rows: 5,
            spacing_m: 600.0,
        }
    }
}

impl LatticeConfig {
    pub fn num_segments(&self) -> usize {
        self.rows * self.cols.saturating_sub(1) + self.cols * self.rows.saturating_sub(1)
    }

    pub fn node(&self, row: usize, col: usize) -> GeoPoint {
        self.origin.offset_m(col as f64 * self.spacing_m, row as f64 * self.spacing_m)
    }
}

/// One injected event: `query_volume` extra arrivals per bin in cell
/// `(x, y)` during bins `[start_bin, start_bin + duration_bins)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectedEvent {
    pub x: u32,
    pub y: u32,
    pub start_bin: usize,
    pub duration_bins: usize,
    pub query_volume: u32,
    pub speed_drop_fraction: f64,
}

impl InjectedEvent {
    pub fn cell(&self) -> Cell {
        Cell::new(self.x, self.y)
    }

    pub fn end_bin(&self) -> usize {
        self.start_bin + self.duration_bins - 1
    }

    /// Drop weight in `[0, 1]` at `minute` after `t0`.
    fn ramp(&self, minute: f64) -> f64 {
        let m = MINUTES_PER_BIN as f64;
        let rel = minute / m - self.start_bin as f64;
        let d = self.duration_bins as f64;
        if rel < 0.0 {
            0.0
        } else if rel < d {
            (rel / RAMP_BINS).min(1.0)
        } else {
            (1.0 - (rel - d) / RAMP_BINS).max(0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub ar_coef: f64,
    /// Stationary standard deviation of the AR(1) component, km/h.
    pub ar_sd_kmh: f64,
    /// Standard deviation of independent per-minute jitter, km/h.
    pub jitter_kmh: f64,
    /// Probability that a bin loses a run of one to five raw minutes.
    pub gap_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            ar_coef: 0.8,
            ar_sd_kmh: 2.0,
            jitter_kmh: 0.8,
            gap_rate: 0.0005,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        NoiseConfig {
            ar_coef: 0.8,
            ar_sd_kmh: 0.0,
            jitter_kmh: 0.0,
            gap_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub days: usize,
    /// Epoch seconds of the first minute; local midnight by default.
    pub t0: i64,
    pub utc_offset_hours: i32,
    pub grid: GridMap,
    pub lattice: LatticeConfig,
    pub events: Vec<InjectedEvent>,
    /// Peak Poisson rate of background arrivals per cell and bin.
    pub background_rate: f64,
    /// Fractional speed loss at the daily trough.
    pub daily_amplitude: f64,
    /// Fractional speed gain on weekends.
    pub weekly_amplitude: f64,
    pub noise: NoiseConfig,
    /// Probability that a query is preceded by an earlier search of the same user.
    pub duplicate_rate: f64,
    /// Probability of an extra query whose current location is far from its start.
    pub far_rate: f64,
}

/// 2017-04-01 00:00 in Beijing.
pub const DEFAULT_T0: i64 = 1_490_947_200;

impl Default for WorldConfig {
    /// Four weeks, ten events between the second and fourth week.
    fn default() -> Self {
        let schedule: [(usize, f64, u32, u32); 10] = [
            (7, 10.0, 34, 31),
            (8, 15.0, 36, 33),
            (10, 12.0, 35, 32),
            (11, 16.0, 37, 31),
            (13, 11.0, 34, 33),
            (15, 14.0, 36, 31),
            (17, 10.5, 35, 33),
            (20, 15.5, 37, 32),
            (22, 12.5, 34, 32),
            (25, 13.0, 36, 32),
        ];
        let events = schedule
            .iter()
            .map(|&(day, hour, x, y)| InjectedEvent {
                x,
                y,
                start_bin: day * BINS_PER_DAY + (hour * 4.0) as usize,
                duration_bins: 8,
                query_volume: 420,
                speed_drop_fraction: 0.4,
            })
            .collect();
        WorldConfig {
            seed: 7,
            days: 28,
            t0: DEFAULT_T0,
            utc_offset_hours: 8,
            grid: GridMap::default(),
            lattice: LatticeConfig::default(),
            events,
            background_rate: 10.0,
            daily_amplitude: 0.35,
            weekly_amplitude: 0.08,
            noise: NoiseConfig::default(),
            duplicate_rate: 0.05,
            far_rate: 0.02,
        }
    }
}

impl WorldConfig {
    /// No events and no noise: purely periodic speeds.
    pub fn null() -> Self {
        WorldConfig {
            events: Vec::new(),
            noise: NoiseConfig::zero(),
            ..WorldConfig::default()
        }
    }

    pub fn bins(&self) -> usize {
        self.days * BINS_PER_DAY
    }

    pub fn minutes(&self) -> usize {
        self.bins() * MINUTES_PER_BIN
    }

    pub fn validate(&self, params: &EventParams) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.grid.validate()?;
        if self.days == 0 {
            return bad("world needs at least one day".into());
        }
        if self.lattice.cols < 2 || self.lattice.rows < 2 || !(self.lattice.spacing_m > 0.0) {
            return bad("lattice needs at least 2x2 nodes and positive spacing".into());
        }
        for corner in [
            self.lattice.node(0, 0),
            self.lattice.node(self.lattice.rows - 1, self.lattice.cols - 1),
        ] {
            if !self.grid.contains(&corner) {
                return bad(format!("lattice corner ({}, {}) lies outside the grid", corner.lon, corner.lat));
            }
        }
        let fractions = [self.duplicate_rate, self.far_rate, self.noise.gap_rate];
        if fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
            return bad("duplicate_rate, far_rate and gap_rate must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.noise.ar_coef) || self.noise.ar_sd_kmh < 0.0 || self.noise.jitter_kmh < 0.0 {
            return bad("noise needs ar_coef in [0, 1) and non-negative deviations".into());
        }
        if !(0.0..1.0).contains(&self.daily_amplitude) || self.weekly_amplitude < 0.0 || !(self.background_rate >= 0.0) {
            return bad("daily_amplitude must lie in [0, 1); weekly_amplitude and background_rate must be non-negative".into());
        }
        for (i, e) in self.events.iter().enumerate() {
            if !(e.speed_drop_fraction > 0.0 && e.speed_drop_fraction < 1.0) {
                return bad(format!("event {i}: speed_drop_fraction must lie in (0, 1)"));
            }
            if e.duration_bins <= params.epsilon {
                return bad(format!("event {i}: duration_bins {} must exceed epsilon {}", e.duration_bins, params.epsilon));
            }
            if e.x >= self.grid.cols || e.y >= self.grid.rows {
                return bad(format!("event {i}: cell ({}, {}) outside the grid", e.x, e.y));
            }
            if e.start_bin + e.duration_bins > self.bins() {
                return bad(format!("event {i} runs past the last bin"));
            }
        }
        Ok(())
    }
}

/// A generated world, held in memory exactly as it is written to CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub segments: Vec<RoadSegment>,
    /// Raw minute speeds, one series per segment in `segments` order.
    pub speeds: Vec<SpeedSeries>,
    /// Sorted by `(search_ts, user_id)`.
    pub queries: Vec<RawQuery>,
    pub events: Vec<InjectedEvent>,
}

fn node_id(r: usize, c: usize) -> String {
    format!("N{r}_{c}")
}

fn lattice_segments(l: &LatticeConfig, rng: &mut ChaCha8Rng) -> Vec<RoadSegment> {
    let mut out = Vec::with_capacity(l.num_segments());
    let mut push = |a: (usize, usize), b: (usize, usize), arterial: bool, rng: &mut ChaCha8Rng| {
        let (width_class, speed_class, lane_class) = if arterial { (55, 4, 3) } else { (30, 6, 2) };
        let direction = if rng.random::<f64>() < 0.1 { 0 } else { 1 };
        out.push(RoadSegment {
            link_id: format!("L{:03}", out.len()),
            width_class,
            direction,
            snode: node_id(a.0, a.1),
            enode: node_id(b.0, b.1),
            snode_gps: l.node(a.0, a.1),
            enode_gps: l.node(b.0, b.1),
            length_km: l.spacing_m / 1000.0,
            speed_class,
            lane_class,
        });
    };
    for r in 0..l.rows {
        for c in 0..l.cols - 1 {
            push((r, c), (r, c + 1), r == 0 || r == l.rows - 1, rng);
        }
    }
    for c in 0..l.cols {
        for r in 0..l.rows - 1 {
            push((r, c), (r + 1, c), c % 3 == 0, rng);
        }
    }
    out
}

fn free_flow_kmh(seg: &RoadSegment) -> f64 {
    match seg.speed_class {
        4 => 60.0,
        _ => 40.0,
    }
}

/// Fraction of the local day elapsed at epoch second `ts`.
fn day_phase(ts: i64, utc_offset_hours: i32) -> f64 {
    let local = ts + utc_offset_hours as i64 * 3600;
    local.rem_euclid(86_400) as f64 / 86_400.0
}

fn is_weekend(ts: i64, utc_offset_hours: i32) -> bool {
    let local = ts + utc_offset_hours as i64 * 3600;
    // 1970-01-01 was a Thursday; days since then modulo 7 give 2 = Saturday, 3 = Sunday.
    matches!(local.div_euclid(86_400).rem_euclid(7), 2 | 3)
}

/// Noise-free, event-free speed factor in `(0, 1 + weekly]`.
fn periodic_factor(cfg: &WorldConfig, ts: i64) -> f64 {
    let phase = day_phase(ts, cfg.utc_offset_hours);
    let daily = 1.0 - cfg.daily_amplitude * 0.5 * (1.0 - (2.0 * PI * (phase - 4.0 / 24.0)).cos());
    let weekly = if is_weekend(ts, cfg.utc_offset_hours) { 1.0 + cfg.weekly_amplitude } else { 1.0 };
    daily * weekly
}

/// Background arrival rate per cell at bin `b`; between 55% and 100% of
/// the peak, highest at 14:00.
fn background_lambda(cfg: &WorldConfig, b: usize) -> f64 {
    let ts = cfg.t0 + b as i64 * BIN_SECONDS + BIN_SECONDS / 2;
    let phase = day_phase(ts, cfg.utc_offset_hours);
    let activity = 0.5 * (1.0 - (2.0 * PI * (phase - 2.0 / 24.0)).cos());
    cfg.background_rate * (0.55 + 0.45 * activity)
}

fn affected(seg: &RoadSegment, e: &InjectedEvent, grid: &GridMap) -> bool {
    distance_m(&seg.midpoint(), &grid.cell_center(e.cell())) <= EVENT_RADIUS_M
}

fn gen_speeds(cfg: &WorldConfig, segments: &[RoadSegment], rng: &mut ChaCha8Rng) -> Vec<SpeedSeries> {
    let minutes = cfg.minutes();
    let bins = cfg.bins();
    let innovation = cfg.noise.ar_sd_kmh * (1.0 - cfg.noise.ar_coef * cfg.noise.ar_coef).sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let periodic: Vec<f64> = (0..minutes)
        .map(|m| periodic_factor(cfg, cfg.t0 + m as i64 * RAW_STEP_S))
        .collect();
    segments
        .iter()
        .map(|seg| {
            let v_free = free_flow_kmh(seg) * rng.random_range(0.9..1.1);
            let events: Vec<&InjectedEvent> = cfg.events.iter().filter(|e| affected(seg, e, &cfg.grid)).collect();
            let mut ar = Vec::with_capacity(bins + 1);
            let mut e = cfg.noise.ar_sd_kmh * std_normal.sample(rng);
            for _ in 0..=bins {
                ar.push(e);
                e = cfg.noise.ar_coef * e + innovation * std_normal.sample(rng);
            }
            let mut gap = vec![false; minutes];
            if cfg.noise.gap_rate > 0.0 {
                for k in 0..bins {
                    if rng.random::<f64>() < cfg.noise.gap_rate {
                        let len = rng.random_range(1..=5);
                        let first = k * MINUTES_PER_BIN + rng.random_range(0..=MINUTES_PER_BIN - len);
                        gap[first..first + len].fill(true);
                    }
                }
            }
            let values = (0..minutes)
                .map(|m| {
                    let k = m / MINUTES_PER_BIN;
                    let frac = (m % MINUTES_PER_BIN) as f64 / MINUTES_PER_BIN as f64;
                    let noise = ar[k] + frac * (ar[k + 1] - ar[k]) + cfg.noise.jitter_kmh * std_normal.sample(rng);
                    let drop: f64 = events
                        .iter()
                        .map(|ev| 1.0 - ev.speed_drop_fraction * ev.ramp(m as f64))
                        .product();
                    let v = (v_free * periodic[m] * drop + noise).max(MIN_SPEED_KMH);
                    (!gap[m]).then(|| (v * 100.0).round() / 100.0)
                })
                .collect();
            SpeedSeries::new(seg.link_id.clone(), cfg.t0, RAW_STEP_S, values)
        })
        .collect()
}

/// Cells whose centre lies within the lattice bounding box grown by 300 m.
pub fn active_cells(cfg: &WorldConfig) -> Vec<Cell> {
    let l = &cfg.lattice;
    let sw = l.node(0, 0).offset_m(-300.0, -300.0);
    let ne = l.node(l.rows - 1, l.cols - 1).offset_m(300.0, 300.0);
    let mut cells = Vec::new();
    for y in 0..cfg.grid.rows {
        for x in 0..cfg.grid.cols {
            let c = cfg.grid.cell_center(Cell::new(x, y));
            if (sw.lon..=ne.lon).contains(&c.lon) && (sw.lat..=ne.lat).contains(&c.lat) {
                cells.push(Cell::new(x, y));
            }
        }
    }
    cells
}

const MODE_WEIGHTS: [(QueryMode, f64); 5] = [
    (QueryMode::RouteCar, 0.45),
    (QueryMode::RouteBus, 0.2),
    (QueryMode::LocationSearch, 0.2),
    (QueryMode::RouteBike, 0.1),
    (QueryMode::RouteWalk, 0.05),
];

fn pick_mode(rng: &mut ChaCha8Rng) -> QueryMode {
    let mut u = rng.random::<f64>();
    for (mode, w) in MODE_WEIGHTS {
        if u < w {
            return mode;
        }
        u -= w;
    }
    QueryMode::RouteCar
}

struct QueryGen<'a> {
    cfg: &'a WorldConfig,
    rng: ChaCha8Rng,
    next_user: u64,
    out: Vec<RawQuery>,
}

impl QueryGen<'_> {
    fn point_in_cell(&mut self, cell: Cell) -> GeoPoint {
        let g = &self.cfg.grid;
        let lon = g.bbox[0] + (cell.x as f64 + self.rng.random_range(0.01..0.99)) * g.cell_width_deg();
        let lat = g.bbox[1] + (cell.y as f64 + self.rng.random_range(0.01..0.99)) * g.cell_height_deg();
        GeoPoint::new(lon, lat)
    }

    fn user(&mut self) -> String {
        self.next_user += 1;
        format!("u{:08}", self.next_user)
    }

    /// A search built so that its estimated arrival falls in bin `b` of `cell`.
    fn arrival(&mut self, cell: Cell, b: usize, trip_m: (f64, f64), dest_word: String) -> RawQuery {
        let dest = self.point_in_cell(cell);
        let mode = pick_mode(&mut self.rng);
        let d = self.rng.random_range(trip_m.0..trip_m.1);
        let bearing = self.rng.random_range(0.0..2.0 * PI);
        let start = dest.offset_m(d * bearing.sin(), d * bearing.cos());
        let cur = match mode {
            QueryMode::LocationSearch => start,
            _ => {
                let r = self.rng.random_range(0.0..500.0);
                let a = self.rng.random_range(0.0..2.0 * PI);
                start.offset_m(r * a.sin(), r * a.cos())
            }
        };
        let mut q = RawQuery {
            user_id: self.user(),
            search_ts: 0,
            cur,
            start,
            dest,
            start_word: format!("origin_{}", self.rng.random_range(0..50)),
            dest_word,
            mode,
        };
        let lead = estimate_times(&q, &self.cfg.grid).t_d;
        let arrive = (self.cfg.t0 + b as i64 * BIN_SECONDS) as f64 + self.rng.random_range(1.0..(BIN_SECONDS - 1) as f64);
        q.search_ts = (arrive - lead).round() as i64;
        q
    }

    fn push_with_decoys(&mut self, q: RawQuery, cells: &[Cell]) {
        if self.rng.random::<f64>() < self.cfg.duplicate_rate {
            // An earlier search by the same user; dedup keeps only `q`.
            let cell = cells[self.rng.random_range(0..cells.len())];
            let mut early = q.clone();
            early.dest = self.point_in_cell(cell);
            early.dest_word = format!("poi_{}_{}_{}", cell.x, cell.y, self.rng.random_range(0..5));
            early.search_ts = q.search_ts - self.rng.random_range(30..540);
            self.out.push(early);
        }
        if self.rng.random::<f64>() < self.cfg.far_rate {
            // Current location too far from the start; proximity filtering drops it.
            let mut far = q.clone();
            far.user_id = self.user();
            far.mode = QueryMode::RouteCar;
            let d = self.rng.random_range(2500.0..5000.0);
            far.cur = far.start.offset_m(d, 0.0);
            self.out.push(far);
        }
        self.out.push(q);
    }
}

fn gen_queries(cfg: &WorldConfig, rng: ChaCha8Rng) -> Vec<RawQuery> {
    let cells = active_cells(cfg);
    let mut g = QueryGen {
        cfg,
        rng,
        next_user: 0,
        out: Vec::new(),
    };
    for b in 0..cfg.bins() {
        let lambda = background_lambda(cfg, b);
        for &cell in &cells {
            let n = if lambda > 0.0 {
                Poisson::new(lambda).expect("positive rate").sample(&mut g.rng) as u64
            } else {
                0
            };
            for _ in 0..n {
                let word = format!("poi_{}_{}_{}", cell.x, cell.y, g.rng.random_range(0..5));
                let q = g.arrival(cell, b, (500.0, 8000.0), word);
                g.push_with_decoys(q, &cells);
            }
        }
        for (k, e) in cfg.events.iter().enumerate() {
            if (e.start_bin..e.start_bin + e.duration_bins).contains(&b) {
                for _ in 0..e.query_volume {
                    let q = g.arrival(e.cell(), b, (2000.0, 12000.0), format!("venue_{k}"));
                    g.push_with_decoys(q, &cells);
                }
            }
        }
    }
    let mut out = g.out;
    out.sort_by(|a, b| (a.search_ts, a.user_id.as_str()).cmp(&(b.search_ts, b.user_id.as_str())));
    out
}

/// Generates the world for `cfg`; the same config always yields the same world.
pub fn gen_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate(&EventParams {
        epsilon: 0,
        ..EventParams::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let segments = lattice_segments(&cfg.lattice, &mut rng);
    let speeds = gen_speeds(cfg, &segments, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5BEE_D5));
    let queries = gen_queries(cfg, ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0B5E_44ED_0C7));
    Ok(World {
        config: cfg.clone(),
        segments,
        speeds,
        queries,
        events: cfg.events.clone(),
    })
}

/// Ground-truth events matched by a discovered event in the same cell whose
/// start and end each lie within `tolerance` bins.
pub fn match_events(truth: &[InjectedEvent], found: &[EventRecord], tolerance: usize) -> Vec<bool> {
    truth
        .iter()
        .map(|t| {
            found.iter().any(|f| {
                f.cell() == t.cell() && f.t_s.abs_diff(t.start_bin) <= tolerance && f.t_d.abs_diff(t.end_bin()) <= tolerance
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldDiagnostics {
    pub segments: usize,
    pub raw_queries: usize,
    pub min_speed_kmh: f64,
    pub all_positive: bool,
    /// Mean one-day-lag autocorrelation of the 15-minute speeds.
    pub periodicity: f64,
    pub injected_events: usize,
    pub discovered_events: usize,
    pub recovered_events: usize,
    /// `None` when no events were injected.
    pub recovery_rate: Option<f64>,
    /// Spearman correlation of average nearby speed and query counts around discovered events.
    pub spearman: Option<f64>,
}

impl WorldDiagnostics {
    pub fn recovery_display(&self) -> String {
        match self.recovery_rate {
            Some(r) => format!("{r:.2}"),
            None => "n/a".into(),
        }
    }
}

fn lag_autocorrelation(v: &[Option<f64>], lag: usize) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = (lag..v.len()).filter_map(|i| Some((v[i - lag]?, v[i]?))).collect();
    if pairs.len() < 3 {
        return None;
    }
    let n = pairs.len() as f64;
    let (ma, mb) = pairs.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        cov += (a - ma) * (b - mb);
        va += (a - ma) * (a - ma);
        vb += (b - mb) * (b - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Bins of padding around each event in the speed/query correlation.
pub const CORRELATION_PAD_BINS: usize = 8;

/// Runs query preprocessing and event discovery on `world` and scores the
/// outcome against its ground truth.
pub fn validate_world(world: &World, params: &EventParams) -> Result<WorldDiagnostics> {
    let cfg = &world.config;
    let net: RoadNetwork = build_graph(world.segments.clone())?;
    let pre = preprocess(world.queries.clone(), &cfg.grid)?;
    let tensor = build_arrival_tensor(&pre.queries, &cfg.grid, cfg.t0, BIN_SECONDS, cfg.bins());
    let found = discover_events(&tensor, params, &pre.queries);
    let smoothed = world
        .speeds
        .iter()
        .map(|s| smooth_and_resample(s, MINUTES_PER_BIN, MINUTES_PER_BIN))
        .collect::<Result<Vec<_>>>()?;
    let min_speed_kmh = world
        .speeds
        .iter()
        .flat_map(|s| s.values.iter().flatten())
        .copied()
        .fold(f64::INFINITY, f64::min);
    let acs: Vec<f64> = smoothed.iter().filter_map(|s| lag_autocorrelation(&s.values, BINS_PER_DAY)).collect();
    let periodicity = if acs.is_empty() { 0.0 } else { acs.iter().sum::<f64>() / acs.len() as f64 };
    let recovered = match_events(&world.events, &found, 1).into_iter().filter(|m| *m).count();
    Ok(WorldDiagnostics {
        segments: world.segments.len(),
        raw_queries: world.queries.len(),
        min_speed_kmh,
        all_positive: min_speed_kmh > 0.0,
        periodicity,
        injected_events: world.events.len(),
        discovered_events: found.len(),
        recovered_events: recovered,
        recovery_rate: (!world.events.is_empty()).then(|| recovered as f64 / world.events.len() as f64),
        spearman: event_speed_correlation(&found, &tensor, &net, &smoothed, CORRELATION_PAD_BINS)?,
    })
}
