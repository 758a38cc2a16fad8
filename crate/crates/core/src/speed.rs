//! Speed smoothing, resampling, normalization and supervised windows.
//!
//! Missing observations are `None` from ingestion onwards and never become
//! zeros. A smoothed bin is missing if any raw sample in its window is, and
//! a window is dropped if any of its bins is missing.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RAW_STEP_S: i64 = 60;
pub const BIN_STEP_S: i64 = 900;
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedSeries {
    pub link_id: String,
    pub t0: i64,
    pub step: i64,
    pub values: Vec<Option<f64>>,
}

impl SpeedSeries {
    pub fn new(link_id: impl Into<String>, t0: i64, step: i64, values: Vec<Option<f64>>) -> Self {
        SpeedSeries {
            link_id: link_id.into(),
            t0,
            step,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn observed(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    /// Timestamp of the start of sample `i`.
    pub fn ts(&self, i: usize) -> i64 {
        self.t0 + i as i64 * self.step
    }
}

/// Trailing moving average of `window` raw samples, sampled every `stride`
/// samples. Output sample `k` averages the `window` raw values ending at raw
/// index `(k + 1) * stride - 1`.
pub fn smooth_and_resample(raw: &SpeedSeries, window: usize, stride: usize) -> Result<SpeedSeries> {
    if raw.step != RAW_STEP_S {
        return Err(Error::Precondition(format!(
            "raw series {} has step {} s, expected {RAW_STEP_S}",
            raw.link_id, raw.step
        )));
    }
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("window and stride must be positive".into()));
    }
    let n_out = raw.len() / stride;
    let values = (0..n_out)
        .map(|k| {
            let end = (k + 1) * stride;
            if end < window {
                return None;
            }
            let slice = &raw.values[end - window..end];
            let mut sum = 0.0;
            for v in slice {
                sum += (*v)?;
            }
            Some(sum / window as f64)
        })
        .collect();
    Ok(SpeedSeries::new(
        raw.link_id.clone(),
        raw.t0,
        raw.step * stride as i64,
        values,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats { mean: 0.0, std: 1.0 }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Mean and population standard deviation of the observed values,
    /// with the deviation floored at [`STD_FLOOR`].
    pub fn fit(values: &[Option<f64>]) -> Option<NormStats> {
        let obs: Vec<f64> = values.iter().flatten().copied().collect();
        if obs.is_empty() {
            return None;
        }
        let n = obs.len() as f64;
        let mean = obs.iter().sum::<f64>() / n;
        let var = obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(NormStats {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        })
    }
}

/// Normalized halves of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSeries {
    pub train: SpeedSeries,
    pub test: SpeedSeries,
    pub stats: NormStats,
}

/// Splits at bin `split` and z-scores both halves with statistics of the
/// training half.
pub fn split_and_normalize(series: &SpeedSeries, split: usize) -> Result<SplitSeries> {
    if split == 0 || split >= series.len() {
        return Err(Error::InvalidArgument(format!(
            "split {split} does not leave both halves of {} bins non-empty",
            series.len()
        )));
    }
    let stats = NormStats::fit(&series.values[..split]).ok_or_else(|| {
        Error::Missing(format!("training half of {} has no observations", series.link_id))
    })?;
    let norm = |vals: &[Option<f64>]| -> Vec<Option<f64>> {
        vals.iter().map(|v| v.map(|x| stats.normalize(x))).collect()
    };
    Ok(SplitSeries {
        train: SpeedSeries::new(series.link_id.clone(), series.t0, series.step, norm(&series.values[..split])),
        test: SpeedSeries::new(
            series.link_id.clone(),
            series.ts(split),
            series.step,
            norm(&series.values[split..]),
        ),
        stats,
    })
}

/// Identifies a window: `link` indexes [`WindowSet::link_ids`], `start` is
/// the first input bin in the segment's full series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowKey {
    pub link: usize,
    pub start: usize,
}

/// Supervised windows over one or more segments. Values are normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub t: usize,
    pub t_prime: usize,
    pub link_ids: Vec<String>,
    pub stats: Vec<NormStats>,
    pub keys: Vec<WindowKey>,
    /// `[num_windows, t, 1]`
    pub inputs: Array3<f64>,
    /// `[num_windows, t_prime]`
    pub targets: Array2<f64>,
    /// Windows skipped because they touched a missing bin.
    pub dropped: usize,
}

/// Window start positions `k` with `k % stride == 0` inside `starts`,
/// keeping only fully observed windows. Returns the kept starts and the
/// number dropped.
pub fn window_starts(
    values: &[Option<f64>],
    t: usize,
    t_prime: usize,
    stride: usize,
    starts: std::ops::Range<usize>,
) -> (Vec<usize>, usize) {
    let span = t + t_prime;
    if values.len() < span || stride == 0 {
        return (Vec::new(), 0);
    }
    let last = values.len() - span;
    // prefix count of missing bins so each window check is O(1)
    let mut missing = vec![0usize; values.len() + 1];
    for (i, v) in values.iter().enumerate() {
        missing[i + 1] = missing[i] + v.is_none() as usize;
    }
    let mut kept = Vec::new();
    let mut dropped = 0;
    let lo = starts.start.div_ceil(stride) * stride;
    let mut k = lo;
    while k < starts.end && k <= last {
        if missing[k + span] - missing[k] == 0 {
            kept.push(k);
        } else {
            dropped += 1;
        }
        k += stride;
    }
    (kept, dropped)
}

/// Windows of `t` inputs and `t_prime` targets at the given stride over a
/// single normalized series.
pub fn make_windows(series: &SpeedSeries, t: usize, t_prime: usize, stride: usize, stats: NormStats) -> Result<WindowSet> {
    if t == 0 || t_prime == 0 || stride == 0 {
        return Err(Error::InvalidArgument("t, t_prime and stride must be positive".into()));
    }
    if series.len() < t + t_prime {
        return Err(Error::InvalidArgument(format!(
            "series of {} bins is shorter than t + t' = {}",
            series.len(),
            t + t_prime
        )));
    }
    let mut b = WindowSetBuilder::new(t, t_prime);
    let link = b.add_link(&series.link_id, stats);
    let (starts, dropped) = window_starts(&series.values, t, t_prime, stride, 0..series.len());
    for s in starts {
        b.push(link, s, &series.values);
    }
    b.dropped += dropped;
    Ok(b.finish())
}

/// Incremental construction of a multi-segment [`WindowSet`].
#[derive(Debug, Clone)]
pub struct WindowSetBuilder {
    t: usize,
    t_prime: usize,
    link_ids: Vec<String>,
    stats: Vec<NormStats>,
    keys: Vec<WindowKey>,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    pub dropped: usize,
}

impl WindowSetBuilder {
    pub fn new(t: usize, t_prime: usize) -> Self {
        WindowSetBuilder {
            t,
            t_prime,
            link_ids: Vec::new(),
            stats: Vec::new(),
            keys: Vec::new(),
            inputs: Vec::new(),
            targets: Vec::new(),
            dropped: 0,
        }
    }

    pub fn add_link(&mut self, link_id: &str, stats: NormStats) -> usize {
        self.link_ids.push(link_id.to_string());
        self.stats.push(stats);
        self.link_ids.len() - 1
    }

    /// Appends the window at `start` of a fully observed normalized series.
    ///
    /// Panics if any value in the window is missing; use [`window_starts`].
    pub fn push(&mut self, link: usize, start: usize, values: &[Option<f64>]) {
        let span = &values[start..start + self.t + self.t_prime];
        let (inp, tgt) = span.split_at(self.t);
        self.inputs.extend(inp.iter().map(|v| v.expect("window contains a missing bin")));
        self.targets.extend(tgt.iter().map(|v| v.expect("window contains a missing bin")));
        self.keys.push(WindowKey { link, start });
    }

    pub fn finish(self) -> WindowSet {
        let n = self.keys.len();
        WindowSet {
            t: self.t,
            t_prime: self.t_prime,
            link_ids: self.link_ids,
            stats: self.stats,
            keys: self.keys,
            inputs: Array3::from_shape_vec((n, self.t, 1), self.inputs).expect("input buffer shape"),
            targets: Array2::from_shape_vec((n, self.t_prime), self.targets).expect("target buffer shape"),
            dropped: self.dropped,
        }
    }
}

const WINDOW_SCHEMA_VERSION: u32 = 1;

/// JSON sidecar of the binary window file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowSidecar {
    schema_version: u32,
    layout: String,
    num_windows: usize,
    t: usize,
    t_prime: usize,
    features: usize,
    link_ids: Vec<String>,
    stats: Vec<NormStats>,
    keys: Vec<(usize, usize)>,
    dropped: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn stats_for(&self, window: usize) -> NormStats {
        self.stats[self.keys[window].link]
    }

    pub fn link_of(&self, window: usize) -> &str {
        &self.link_ids[self.keys[window].link]
    }

    /// Target speeds of one window in km/h.
    pub fn targets_kmh(&self, window: usize) -> Vec<f64> {
        let s = self.stats_for(window);
        self.targets.row(window).iter().map(|&z| s.denormalize(z)).collect()
    }

    /// Last observed input speed of one window in km/h.
    pub fn last_input_kmh(&self, window: usize) -> f64 {
        self.stats_for(window).denormalize(self.inputs[[window, self.t - 1, 0]])
    }

    /// Writes `<stem>.bin` (little-endian f64: all inputs in row-major
    /// `[n, t, features]` order, then all targets `[n, t']`) and
    /// `<stem>.json` describing shapes, keys and statistics.
    pub fn save(&self, bin_path: &Path, json_path: &Path) -> Result<()> {
        let file = fs::File::create(bin_path).map_err(|e| Error::io(bin_path, e))?;
        let mut w = BufWriter::new(file);
        for v in self.inputs.iter().chain(self.targets.iter()) {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(bin_path, e))?;
        }
        w.flush().map_err(|e| Error::io(bin_path, e))?;
        let side = WindowSidecar {
            schema_version: WINDOW_SCHEMA_VERSION,
            layout: "f64-le; inputs[n][t][features] then targets[n][t_prime]".into(),
            num_windows: self.len(),
            t: self.t,
            t_prime: self.t_prime,
            features: 1,
            link_ids: self.link_ids.clone(),
            stats: self.stats.clone(),
            keys: self.keys.iter().map(|k| (k.link, k.start)).collect(),
            dropped: self.dropped,
        };
        let json = serde_json::to_string_pretty(&side)?;
        fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))
    }

    pub fn load(bin_path: &Path, json_path: &Path) -> Result<WindowSet> {
        let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let side: WindowSidecar = serde_json::from_str(&text)?;
        if side.schema_version != WINDOW_SCHEMA_VERSION || side.features != 1 {
            return Err(Error::format(
                "window sidecar",
                format!("unsupported schema {} / features {}", side.schema_version, side.features),
            ));
        }
        let n = side.num_windows;
        let expect = n * side.t + n * side.t_prime;
        let file = fs::File::open(bin_path).map_err(|e| Error::io(bin_path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(bin_path, e))?;
        if bytes.len() != expect * 8 {
            return Err(Error::format(
                "window file",
                format!("{} bytes, expected {}", bytes.len(), expect * 8),
            ));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let (inp, tgt) = vals.split_at(n * side.t);
        Ok(WindowSet {
            t: side.t,
            t_prime: side.t_prime,
            link_ids: side.link_ids,
            stats: side.stats,
            keys: side.keys.into_iter().map(|(link, start)| WindowKey { link, start }).collect(),
            inputs: Array3::from_shape_vec((n, side.t, 1), inp.to_vec()).map_err(|e| Error::format("window file", e.to_string()))?,
            targets: Array2::from_shape_vec((n, side.t_prime), tgt.to_vec()).map_err(|e| Error::format("window file", e.to_string()))?,
            dropped: side.dropped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(values: Vec<Option<f64>>) -> SpeedSeries {
        SpeedSeries::new("L", 0, 60, values)
    }

    #[test]
    fn constant_series_stays_constant() {
        let s = smooth_and_resample(&raw(vec![Some(40.0); 90]), 15, 15).unwrap();
        assert_eq!(s.values, vec![Some(40.0); 6]);
        assert_eq!(s.step, 900);
    }

    #[test]
    fn one_to_fifteen_averages_to_eight() {
        let s = smooth_and_resample(&raw((1..=15).map(|v| Some(v as f64)).collect()), 15, 15).unwrap();
        assert_eq!(s.values, vec![Some(8.0)]);
    }

    #[test]
    fn alternating_speeds_average_to_thirty() {
        let vals = (0..30).map(|i| Some(if i % 2 == 0 { 20.0 } else { 40.0 })).collect();
        let s = smooth_and_resample(&raw(vals), 15, 15).unwrap();
        // an odd window holds 8 of one speed and 7 of the other
        let (b0, b1) = (s.values[0].unwrap(), s.values[1].unwrap());
        assert!((b0 - (8.0 * 20.0 + 7.0 * 40.0) / 15.0).abs() < 1e-12);
        assert!((b1 - (7.0 * 20.0 + 8.0 * 40.0) / 15.0).abs() < 1e-12);
        assert!(((b0 + b1) / 2.0 - 30.0).abs() < 1e-12);
    }

    #[test]
    fn missing_raw_value_marks_bin() {
        let mut vals = vec![Some(50.0); 45];
        vals[20] = None;
        let s = smooth_and_resample(&raw(vals), 15, 15).unwrap();
        assert_eq!(s.values, vec![Some(50.0), None, Some(50.0)]);
    }

    #[test]
    fn wrong_step_rejected() {
        let s = SpeedSeries::new("L", 0, 900, vec![Some(1.0); 15]);
        assert!(smooth_and_resample(&s, 15, 15).is_err());
    }

    #[test]
    fn constant_training_half_normalizes_to_zero() {
        let mut v = vec![Some(50.0); 10];
        v.extend((0..10).map(|i| Some(40.0 + i as f64)));
        let s = SpeedSeries::new("L", 0, 900, v);
        let split = split_and_normalize(&s, 10).unwrap();
        assert!(split.train.values.iter().all(|v| *v == Some(0.0)));
        assert_eq!(split.stats.std, STD_FLOOR);
        assert_eq!(split.test.t0, 9000);
    }

    #[test]
    fn test_half_never_influences_stats() {
        let base: Vec<Option<f64>> = (0..40).map(|i| Some(30.0 + (i as f64).sin() * 5.0)).collect();
        let a = split_and_normalize(&SpeedSeries::new("L", 0, 900, base.clone()), 20).unwrap();
        let mut perturbed = base;
        for v in perturbed[20..].iter_mut() {
            *v = Some(v.unwrap() * 3.0 + 7.0);
        }
        let b = split_and_normalize(&SpeedSeries::new("L", 0, 900, perturbed), 20).unwrap();
        assert_eq!(a.stats.mean.to_bits(), b.stats.mean.to_bits());
        assert_eq!(a.stats.std.to_bits(), b.stats.std.to_bits());
    }

    #[test]
    fn all_missing_training_half_errors() {
        let mut v = vec![None; 10];
        v.extend(vec![Some(1.0); 10]);
        assert!(matches!(
            split_and_normalize(&SpeedSeries::new("L", 0, 900, v), 10),
            Err(Error::Missing(_))
        ));
    }

    fn series(len: usize) -> SpeedSeries {
        SpeedSeries::new("L", 0, 900, (0..len).map(|i| Some(i as f64)).collect())
    }

    #[test]
    fn window_counts() {
        let w = make_windows(&series(104), 96, 8, 1, NormStats::identity()).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w.targets.row(0).to_vec(), (96..104).map(|v| v as f64).collect::<Vec<_>>());
        let w = make_windows(&series(192), 96, 8, 1, NormStats::identity()).unwrap();
        assert_eq!(w.len(), 89);
        assert!(make_windows(&series(103), 96, 8, 1, NormStats::identity()).is_err());
    }

    #[test]
    fn missing_bin_drops_exactly_covering_windows() {
        let mut s = series(192);
        s.values[100] = None;
        let w = make_windows(&s, 96, 8, 1, NormStats::identity()).unwrap();
        let covering: Vec<usize> = (0..89).filter(|k| (*k..k + 104).contains(&100)).collect();
        assert_eq!(w.dropped, covering.len());
        for key in &w.keys {
            assert!(!covering.contains(&key.start));
        }
        assert_eq!(w.len() + w.dropped, 89);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let w = make_windows(&series(130), 16, 4, 3, NormStats { mean: 2.0, std: 3.0 }).unwrap();
        let (b, j) = (dir.path().join("w.bin"), dir.path().join("w.json"));
        w.save(&b, &j).unwrap();
        assert_eq!(WindowSet::load(&b, &j).unwrap(), w);
    }

    proptest! {
        #[test]
        fn resampled_length(n in 0usize..400) {
            let s = smooth_and_resample(&raw(vec![Some(10.0); n]), 15, 15).unwrap();
            prop_assert_eq!(s.len(), n / 15);
        }

        #[test]
        fn normalization_round_trip(v in -500.0f64..500.0, mean in 0.0f64..100.0, std in 0.1f64..50.0) {
            let s = NormStats { mean, std };
            prop_assert!((s.denormalize(s.normalize(v)) - v).abs() < 1e-9);
        }

        #[test]
        fn kept_windows_are_fully_observed(holes in proptest::collection::vec(0usize..150, 0..6), stride in 1usize..5) {
            let mut s = series(150);
            for h in &holes {
                s.values[*h] = None;
            }
            let w = make_windows(&s, 20, 5, stride, NormStats::identity()).unwrap();
            let total = (150 - 25) / stride + 1;
            prop_assert_eq!(w.len() + w.dropped, total);
            for k in &w.keys {
                prop_assert!(holes.iter().all(|h| !(k.start..k.start + 25).contains(h)));
            }
        }
    }
}
