//! CSV schemas shared by the generator and the pipeline stages.
//!
//! | file                | columns                                                                 |
//! |---------------------|-------------------------------------------------------------------------|
//! | segments            | link_id, width, direction, snodeid, enodeid, snodegps, enodegps, length, speedclass, lanenum |
//! | speeds              | link_id, ts, speed_kmh (observed samples only)                          |
//! | queries             | user_id, search_ts, cur_lon, cur_lat, start_lon, start_lat, dest_lon, dest_lat, start_word, dest_word, mode |
//! | filtered queries    | t_s, t_d, start_word, dest_word, start_lon, start_lat, dest_lon, dest_lat, x_s, y_s, x_d, y_d |
//! | tensor              | x, y, t, count (non-zero entries)                                       |
//! | events              | x, y, t_s, t_d, qc_cur, qc_last, top_word, top_word_count               |
//! | injected events     | x, y, start_bin, duration_bins, query_volume, speed_drop_fraction       |
//! | query impact        | link_id, t, qi (non-zero entries)                                       |
//!
//! GPS fields hold `"lon,lat"`. Floats are written in shortest round-trip
//! form, so reading a file back reproduces the values bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventRecord;
use crate::geo::{Cell, GeoPoint, GridMap};
use crate::impact::QueryImpact;
use crate::network::RoadSegment;
use crate::query::{ArrivalTimeTensor, Query, QueryMode, RawQuery};
use crate::speed::SpeedSeries;
use crate::synth::InjectedEvent;

fn describe(path: &Path) -> String {
    path.display().to_string()
}

pub fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes only the header line, for empty outputs.
pub fn write_header(path: &Path, columns: &[&str]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", columns.join(",")).map_err(|e| Error::io(path, e))
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::format(describe(path), format!("record {}: {e}", i + 1))))
        .collect()
}

fn fmt_gps(p: &GeoPoint) -> String {
    format!("{},{}", p.lon, p.lat)
}

fn parse_gps(s: &str) -> Result<GeoPoint> {
    let bad = || Error::format("gps field", format!("{s:?} is not \"lon,lat\""));
    let (lon, lat) = s.split_once(',').ok_or_else(bad)?;
    let p = GeoPoint::new(lon.trim().parse().map_err(|_| bad())?, lat.trim().parse().map_err(|_| bad())?);
    p.validate()?;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub link_id: String,
    pub width: u16,
    pub direction: u8,
    pub snodeid: String,
    pub enodeid: String,
    pub snodegps: String,
    pub enodegps: String,
    pub length: f64,
    pub speedclass: u8,
    pub lanenum: u8,
}

impl From<&RoadSegment> for SegmentRow {
    fn from(s: &RoadSegment) -> Self {
        SegmentRow {
            link_id: s.link_id.clone(),
            width: s.width_class,
            direction: s.direction,
            snodeid: s.snode.clone(),
            enodeid: s.enode.clone(),
            snodegps: fmt_gps(&s.snode_gps),
            enodegps: fmt_gps(&s.enode_gps),
            length: s.length_km,
            speedclass: s.speed_class,
            lanenum: s.lane_class,
        }
    }
}

impl TryFrom<SegmentRow> for RoadSegment {
    type Error = Error;

    fn try_from(r: SegmentRow) -> Result<RoadSegment> {
        Ok(RoadSegment {
            snode_gps: parse_gps(&r.snodegps)?,
            enode_gps: parse_gps(&r.enodegps)?,
            link_id: r.link_id,
            width_class: r.width,
            direction: r.direction,
            snode: r.snodeid,
            enode: r.enodeid,
            length_km: r.length,
            speed_class: r.speedclass,
            lane_class: r.lanenum,
        })
    }
}

pub fn write_segments(path: &Path, segments: &[RoadSegment]) -> Result<()> {
    write_rows(path, segments.iter().map(SegmentRow::from))
}

pub fn read_segments(path: &Path) -> Result<Vec<RoadSegment>> {
    read_rows::<SegmentRow>(path)?.into_iter().map(RoadSegment::try_from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedRow {
    pub link_id: String,
    pub ts: i64,
    pub speed_kmh: f64,
}

pub fn write_speeds(path: &Path, series: &[SpeedSeries]) -> Result<()> {
    let rows = series.iter().flat_map(|s| {
        s.values.iter().enumerate().filter_map(move |(i, v)| {
            v.map(|speed_kmh| SpeedRow {
                link_id: s.link_id.clone(),
                ts: s.ts(i),
                speed_kmh,
            })
        })
    });
    write_rows(path, rows)
}

/// Reads speeds onto the grid `t0 + k * step`, `k < len`. Absent samples
/// are missing; a link seen only in the file still gets a series. Series
/// come back sorted by link id.
pub fn read_speeds(path: &Path, t0: i64, step: i64, len: usize) -> Result<Vec<SpeedSeries>> {
    let mut by_link: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for (i, r) in read_rows::<SpeedRow>(path)?.into_iter().enumerate() {
        let bad = |d: String| Error::format(describe(path), format!("record {}: {d}", i + 1));
        let rel = r.ts - t0;
        if rel < 0 || rel % step != 0 || (rel / step) as usize >= len {
            return Err(bad(format!("timestamp {} is not on the {step} s grid of {len} samples from {t0}", r.ts)));
        }
        if !(r.speed_kmh > 0.0 && r.speed_kmh.is_finite()) {
            return Err(bad(format!("speed {} is not positive", r.speed_kmh)));
        }
        let values = by_link.entry(r.link_id).or_insert_with(|| vec![None; len]);
        let slot = &mut values[(rel / step) as usize];
        if slot.is_some() {
            return Err(bad(format!("duplicate sample at {}", r.ts)));
        }
        *slot = Some(r.speed_kmh);
    }
    Ok(by_link
        .into_iter()
        .map(|(id, values)| SpeedSeries::new(id, t0, step, values))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub user_id: String,
    pub search_ts: i64,
    pub cur_lon: f64,
    pub cur_lat: f64,
    pub start_lon: f64,
    pub start_lat: f64,
    pub dest_lon: f64,
    pub dest_lat: f64,
    pub start_word: String,
    pub dest_word: String,
    pub mode: QueryMode,
}

impl From<&RawQuery> for QueryRow {
    fn from(q: &RawQuery) -> Self {
        QueryRow {
            user_id: q.user_id.clone(),
            search_ts: q.search_ts,
            cur_lon: q.cur.lon,
            cur_lat: q.cur.lat,
            start_lon: q.start.lon,
            start_lat: q.start.lat,
            dest_lon: q.dest.lon,
            dest_lat: q.dest.lat,
            start_word: q.start_word.clone(),
            dest_word: q.dest_word.clone(),
            mode: q.mode,
        }
    }
}

impl From<QueryRow> for RawQuery {
    fn from(r: QueryRow) -> Self {
        RawQuery {
            user_id: r.user_id,
            search_ts: r.search_ts,
            cur: GeoPoint::new(r.cur_lon, r.cur_lat),
            start: GeoPoint::new(r.start_lon, r.start_lat),
            dest: GeoPoint::new(r.dest_lon, r.dest_lat),
            start_word: r.start_word,
            dest_word: r.dest_word,
            mode: r.mode,
        }
    }
}

pub fn write_queries(path: &Path, queries: &[RawQuery]) -> Result<()> {
    write_rows(path, queries.iter().map(QueryRow::from))
}

/// Reads CSV, or JSON lines when the extension is `jsonl`.
pub fn read_queries(path: &Path) -> Result<Vec<RawQuery>> {
    let rows: Vec<QueryRow> = if path.extension().is_some_and(|e| e == "jsonl") {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::format(describe(path), format!("line {}: {e}", i + 1)))?,
            );
        }
        rows
    } else {
        read_rows(path)?
    };
    let queries: Vec<RawQuery> = rows.into_iter().map(RawQuery::from).collect();
    for q in &queries {
        for p in [&q.cur, &q.start, &q.dest] {
            p.validate()?;
        }
    }
    Ok(queries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredQueryRow {
    pub t_s: f64,
    pub t_d: f64,
    pub start_word: String,
    pub dest_word: String,
    pub start_lon: f64,
    pub start_lat: f64,
    pub dest_lon: f64,
    pub dest_lat: f64,
    pub x_s: Option<u32>,
    pub y_s: Option<u32>,
    pub x_d: Option<u32>,
    pub y_d: Option<u32>,
}

pub fn write_filtered_queries(path: &Path, queries: &[Query]) -> Result<()> {
    write_rows(
        path,
        queries.iter().map(|q| FilteredQueryRow {
            t_s: q.t_s,
            t_d: q.t_d,
            start_word: q.start_word.clone(),
            dest_word: q.dest_word.clone(),
            start_lon: q.start.lon,
            start_lat: q.start.lat,
            dest_lon: q.dest.lon,
            dest_lat: q.dest.lat,
            x_s: q.cell_s.map(|c| c.x),
            y_s: q.cell_s.map(|c| c.y),
            x_d: q.cell_d.map(|c| c.x),
            y_d: q.cell_d.map(|c| c.y),
        }),
    )
}

pub fn read_filtered_queries(path: &Path) -> Result<Vec<Query>> {
    let cell = |x: Option<u32>, y: Option<u32>| x.zip(y).map(|(x, y)| Cell::new(x, y));
    Ok(read_rows::<FilteredQueryRow>(path)?
        .into_iter()
        .map(|r| Query {
            t_s: r.t_s,
            t_d: r.t_d,
            start_word: r.start_word,
            dest_word: r.dest_word,
            start: GeoPoint::new(r.start_lon, r.start_lat),
            dest: GeoPoint::new(r.dest_lon, r.dest_lat),
            cell_s: cell(r.x_s, r.y_s),
            cell_d: cell(r.x_d, r.y_d),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRow {
    pub x: u32,
    pub y: u32,
    pub t: u32,
    pub count: u32,
}

pub fn write_tensor(path: &Path, d: &ArrivalTimeTensor) -> Result<()> {
    if d.nnz() == 0 {
        return write_header(path, &["x", "y", "t", "count"]);
    }
    write_rows(path, d.entries().map(|(x, y, t, count)| TensorRow { x, y, t, count }))
}

pub fn read_tensor(path: &Path, grid: GridMap, t0: i64, bin: i64, bins: usize) -> Result<ArrivalTimeTensor> {
    let rows = read_rows::<TensorRow>(path)?;
    ArrivalTimeTensor::from_entries(grid, t0, bin, bins, rows.into_iter().map(|r| (r.x, r.y, r.t, r.count)))
}

pub const EVENT_COLUMNS: [&str; 8] = ["x", "y", "t_s", "t_d", "qc_cur", "qc_last", "top_word", "top_word_count"];

pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<()> {
    if events.is_empty() {
        return write_header(path, &EVENT_COLUMNS);
    }
    write_rows(path, events)
}

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    read_rows(path)
}

pub fn write_injected_events(path: &Path, events: &[InjectedEvent]) -> Result<()> {
    if events.is_empty() {
        return write_header(
            path,
            &["x", "y", "start_bin", "duration_bins", "query_volume", "speed_drop_fraction"],
        );
    }
    write_rows(path, events)
}

pub fn read_injected_events(path: &Path) -> Result<Vec<InjectedEvent>> {
    read_rows(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QiRow {
    pub link_id: String,
    pub t: usize,
    pub qi: f64,
}

pub fn write_qi(path: &Path, qi: &QueryImpact) -> Result<()> {
    let rows: Vec<QiRow> = qi
        .nonzero()
        .map(|(l, t, v)| QiRow {
            link_id: qi.link_ids[l].clone(),
            t,
            qi: v,
        })
        .collect();
    if rows.is_empty() {
        return write_header(path, &["link_id", "t", "qi"]);
    }
    write_rows(path, rows)
}

/// Rebuilds a dense impact table over `link_ids`; absent entries are zero.
pub fn read_qi(path: &Path, link_ids: Vec<String>, t0: i64, bin: i64, bins: usize) -> Result<QueryImpact> {
    let mut qi = QueryImpact::zeros(link_ids, t0, bin, bins);
    for r in read_rows::<QiRow>(path)? {
        let l = qi
            .link_position(&r.link_id)
            .ok_or_else(|| Error::UnknownSegment(r.link_id.clone()))?;
        if r.t >= bins {
            return Err(Error::format(describe(path), format!("bin {} outside {bins} bins", r.t)));
        }
        qi.set(l, r.t, r.qi);
    }
    Ok(qi)
}
