//! Forecast metrics, baselines and comparison tables.
//!
//! "Overall" MAPE is the mean over every (window, horizon) term, not the
//! mean of the per-horizon columns; the two differ whenever horizons carry
//! different term counts, as they do under the event mask.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventRecord;
use crate::geo::{distance_m, GridMap};
use crate::models::ForecastData;
use crate::network::RoadNetwork;
use crate::query::ArrivalTimeTensor;
use crate::speed::WindowKey;

/// Radius around an event cell whose segments count as affected, meters.
pub const EVENT_RADIUS_M: f64 = 1000.0;

/// Bins of week, for the historical-average baseline.
pub const BINS_PER_WEEK: usize = 672;

/// Error-free sum: `a + b = s + e` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Sum of absolute percentage errors carried in double-double precision,
/// so the mean is rounded once at the end.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ApeSum {
    hi: f64,
    lo: f64,
    n: usize,
}

impl ApeSum {
    pub fn push(&mut self, actual: f64, predicted: f64) -> Result<()> {
        if !(actual > 0.0) || !actual.is_finite() {
            return Err(Error::InvalidArgument(format!("actual speed {actual} is not positive")));
        }
        let (mut d, mut d_lo) = two_sum(actual, -predicted);
        if d < 0.0 {
            d = -d;
            d_lo = -d_lo;
        }
        let q = d / actual;
        let r = (-q).mul_add(actual, d);
        let term_lo = (r + d_lo) / actual;
        let (s, e) = two_sum(self.hi, q);
        let (hi, lo) = two_sum(s, e + self.lo + term_lo);
        self.hi = hi;
        self.lo = lo;
        self.n += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> Option<f64> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        let q = self.hi / n;
        let r = (-q).mul_add(n, self.hi);
        Some(q + (r + self.lo) / n)
    }

    pub fn merge(&mut self, other: &ApeSum) {
        let (s, e) = two_sum(self.hi, other.hi);
        let (hi, lo) = two_sum(s, e + self.lo + other.lo);
        self.hi = hi;
        self.lo = lo;
        self.n += other.n;
    }
}

/// `(1/T) * sum |v - v~| / v`.
pub fn mape(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} actual values vs {} predictions",
            actual.len(),
            predicted.len()
        )));
    }
    let mut acc = ApeSum::default();
    for (a, p) in actual.iter().zip(predicted) {
        acc.push(*a, *p)?;
    }
    acc.mean()
        .ok_or_else(|| Error::InvalidArgument("MAPE of an empty sequence".into()))
}

/// `(link_id, bin)` pairs inside an event: the segment midpoint is within
/// 1 km of the event cell's center and the bin lies in `[t_s, t_d]`.
pub fn err_e_mask(events: &[EventRecord], net: &RoadNetwork, grid: &GridMap) -> BTreeSet<(String, usize)> {
    let mut mask = BTreeSet::new();
    for e in events {
        let center = grid.cell_center(e.cell());
        for seg in net.segments() {
            if distance_m(&seg.midpoint(), &center) <= EVENT_RADIUS_M {
                for t in e.t_s..=e.t_d {
                    mask.insert((seg.link_id.clone(), t));
                }
            }
        }
    }
    mask
}

/// Dense per-segment view of a mask over `data`'s segments.
pub fn dense_mask(mask: &BTreeSet<(String, usize)>, data: &ForecastData) -> Vec<Vec<bool>> {
    data.segments
        .iter()
        .map(|s| {
            let mut row = vec![false; data.bins];
            for (_, t) in mask.range((s.link_id.clone(), 0)..=(s.link_id.clone(), usize::MAX)) {
                if *t < data.bins {
                    row[*t] = true;
                }
            }
            row
        })
        .collect()
}

/// Average ranks (1-based); ties share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs two equal-length sequences of at least 3, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("correlation of a constant sequence".into()));
    }
    // sqrt(sxx * sxx) == sxx in binary floating point, so equal or mirrored
    // deviations give exactly 1 or -1
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs two equal-length sequences of at least 3, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Repeats the last observed history speed for every horizon, km/h.
pub fn persistence(data: &ForecastData, keys: &[WindowKey]) -> Result<Array2<f64>> {
    let t = data.shape.t;
    let mut out = Array2::zeros((keys.len(), data.shape.t_prime));
    for (r, k) in keys.iter().enumerate() {
        let seg = &data.segments[k.link];
        let last = seg.raw[k.start + t - 1]
            .ok_or_else(|| Error::Missing(format!("history of {} at {}", seg.link_id, k.start)))?;
        out.row_mut(r).fill(last);
    }
    Ok(out)
}

/// Per-segment bin-of-week means over the training half, falling back to
/// the segment's training mean where a bin of week was never observed.
pub fn weekly_profile(data: &ForecastData) -> Vec<Vec<f64>> {
    data.segments
        .iter()
        .map(|s| {
            let mut sum = vec![0.0; BINS_PER_WEEK];
            let mut n = vec![0usize; BINS_PER_WEEK];
            for (b, v) in s.raw[..data.split].iter().enumerate() {
                if let Some(v) = v {
                    sum[b % BINS_PER_WEEK] += v;
                    n[b % BINS_PER_WEEK] += 1;
                }
            }
            (0..BINS_PER_WEEK)
                .map(|p| if n[p] > 0 { sum[p] / n[p] as f64 } else { s.stats.mean })
                .collect()
        })
        .collect()
}

pub fn historical_average(data: &ForecastData, keys: &[WindowKey]) -> Array2<f64> {
    let profile = weekly_profile(data);
    let t = data.shape.t;
    Array2::from_shape_fn((keys.len(), data.shape.t_prime), |(r, k)| {
        let key = keys[r];
        profile[key.link][(key.start + t + k) % BINS_PER_WEEK]
    })
}

/// Per-horizon and overall MAPE of one model on one term set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMape {
    /// `None` where a horizon has no terms.
    pub per_horizon: Vec<Option<f64>>,
    pub overall: Option<f64>,
    pub terms: Vec<usize>,
}

impl HorizonMape {
    /// MAPE over the `(window, horizon)` terms selected by `include`.
    pub fn compute<F>(data: &ForecastData, keys: &[WindowKey], pred: &Array2<f64>, mut include: F) -> Result<HorizonMape>
    where
        F: FnMut(WindowKey, usize) -> bool,
    {
        let tp = data.shape.t_prime;
        if pred.dim() != (keys.len(), tp) {
            return Err(Error::Shape(format!("predictions {:?} for {} windows", pred.dim(), keys.len())));
        }
        let mut sums = vec![ApeSum::default(); tp];
        for (r, key) in keys.iter().enumerate() {
            let actual = data.targets_kmh(*key)?;
            for k in 0..tp {
                if include(*key, key.start + data.shape.t + k) {
                    sums[k].push(actual[k], pred[[r, k]])?;
                }
            }
        }
        let mut all = ApeSum::default();
        for s in &sums {
            all.merge(s);
        }
        Ok(HorizonMape {
            per_horizon: sums.iter().map(ApeSum::mean).collect(),
            overall: all.mean(),
            terms: sums.iter().map(ApeSum::count).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub err_t: HorizonMape,
    pub err_e: HorizonMape,
}

impl ModelMetrics {
    /// Err_T over all terms and Err_E over terms whose target bin is in the
    /// event mask for its segment.
    pub fn compute(name: &str, data: &ForecastData, keys: &[WindowKey], pred: &Array2<f64>, mask: &[Vec<bool>]) -> Result<ModelMetrics> {
        Ok(ModelMetrics {
            model: name.to_string(),
            err_t: HorizonMape::compute(data, keys, pred, |_, _| true)?,
            err_e: HorizonMape::compute(data, keys, pred, |k, b| mask[k.link][b])?,
        })
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl HorizonMape {
    /// Entrywise median over runs; terms are taken from the first run.
    pub fn median(runs: &[&HorizonMape]) -> Option<HorizonMape> {
        let first = runs.first()?;
        let pick = |f: &dyn Fn(&HorizonMape) -> Option<f64>| median(runs.iter().filter_map(|r| f(r)).collect());
        Some(HorizonMape {
            per_horizon: (0..first.per_horizon.len()).map(|k| pick(&|r| r.per_horizon[k])).collect(),
            overall: pick(&|r| r.overall),
            terms: first.terms.clone(),
        })
    }
}

impl ModelMetrics {
    /// Median of several training runs of one model.
    pub fn median(name: &str, runs: &[ModelMetrics]) -> Option<ModelMetrics> {
        Some(ModelMetrics {
            model: name.to_string(),
            err_t: HorizonMape::median(&runs.iter().map(|r| &r.err_t).collect::<Vec<_>>())?,
            err_e: HorizonMape::median(&runs.iter().map(|r| &r.err_e).collect::<Vec<_>>())?,
        })
    }
}

/// Full-scale reference values (percent) printed next to desk results.
/// Rows: Seq2Seq, +AT, +NB, +QI, Hybrid; columns: 8 horizons then overall.
pub const REFERENCE_ERR_T: [(&str, [f64; 9]); 5] = [
    ("Seq2Seq", [4.61, 8.22, 9.28, 9.72, 9.98, 10.27, 10.48, 10.61, 9.23]),
    ("Seq2Seq+AT", [4.53, 8.06, 9.09, 9.48, 9.70, 9.84, 9.93, 10.01, 8.83]),
    ("Seq2Seq+NB", [4.52, 8.05, 9.07, 9.45, 9.67, 9.83, 9.93, 9.99, 8.81]),
    ("Seq2Seq+QI", [4.58, 8.01, 8.95, 9.31, 9.51, 9.66, 9.80, 9.94, 8.72]),
    ("Hybrid", [4.52, 7.93, 8.89, 9.24, 9.43, 9.56, 9.69, 9.78, 8.63]),
];

pub const REFERENCE_ERR_E: [(&str, [f64; 9]); 5] = [
    ("Seq2Seq", [4.76, 8.52, 9.87, 10.52, 10.91, 11.31, 11.60, 11.80, 9.91]),
    ("Seq2Seq+AT", [4.65, 8.32, 9.63, 10.23, 10.58, 10.81, 10.98, 11.13, 9.54]),
    ("Seq2Seq+NB", [4.63, 8.25, 9.53, 10.10, 10.45, 10.70, 10.89, 11.02, 9.45]),
    ("Seq2Seq+QI", [4.69, 8.18, 9.37, 9.93, 10.28, 10.55, 10.77, 10.98, 9.34]),
    ("Hybrid", [4.61, 8.09, 9.30, 9.84, 10.16, 10.39, 10.60, 10.76, 9.22]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    ErrT,
    ErrE,
}

impl Metric {
    fn pick(self, m: &ModelMetrics) -> &HorizonMape {
        match self {
            Metric::ErrT => &m.err_t,
            Metric::ErrE => &m.err_e,
        }
    }

    fn reference(self) -> &'static [(&'static str, [f64; 9]); 5] {
        match self {
            Metric::ErrT => &REFERENCE_ERR_T,
            Metric::ErrE => &REFERENCE_ERR_E,
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Metric::ErrT => "Err_T (%): MAPE on the whole test half",
            Metric::ErrE => "Err_E (%): MAPE during events on the test half",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub t_prime: usize,
    pub bin_minutes: i64,
    pub rows: Vec<ModelMetrics>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl MetricReport {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = (1..=self.t_prime)
            .map(|k| format!("{}-min", k as i64 * self.bin_minutes))
            .collect();
        h.push("Overall".into());
        h
    }

    pub fn get(&self, model: &str) -> Option<&ModelMetrics> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// `metric,model,<horizons...>,overall,terms` with fractions (not %).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,model");
        for h in self.header() {
            let _ = write!(s, ",{}", h.to_lowercase().replace('-', "_"));
        }
        s.push_str(",terms\n");
        for metric in [Metric::ErrT, Metric::ErrE] {
            let tag = if metric == Metric::ErrT { "err_t" } else { "err_e" };
            for r in &self.rows {
                let m = metric.pick(r);
                let _ = write!(s, "{tag},{}", r.model);
                for v in m.per_horizon.iter().chain(std::iter::once(&m.overall)) {
                    match v {
                        Some(x) => {
                            let _ = write!(s, ",{x:.6}");
                        }
                        None => s.push(','),
                    }
                }
                let _ = writeln!(s, ",{}", m.terms.iter().sum::<usize>());
            }
        }
        s
    }

    /// One markdown table per metric, followed by the full-scale reference
    /// values for the model rows that have one.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        for metric in [Metric::ErrT, Metric::ErrE] {
            let _ = writeln!(s, "### {}\n", metric.title());
            let header = self.header();
            let _ = writeln!(s, "| Prediction | {} |", header.join(" | "));
            let _ = writeln!(s, "|---|{}", "---|".repeat(header.len()));
            for r in &self.rows {
                let m = metric.pick(r);
                let cells: Vec<String> = m.per_horizon.iter().chain(std::iter::once(&m.overall)).map(|v| pct(*v)).collect();
                let _ = writeln!(s, "| {} | {} |", r.model, cells.join(" | "));
            }
            if self.t_prime == 8 {
                let _ = writeln!(s, "\nFull-scale reference (real-city data, 128 hidden units):\n");
                let _ = writeln!(s, "| Prediction | {} |", header.join(" | "));
                let _ = writeln!(s, "|---|{}", "---|".repeat(header.len()));
                for (name, vals) in metric.reference() {
                    let cells: Vec<String> = vals.iter().map(|v| format!("{v:.2}")).collect();
                    let _ = writeln!(s, "| {name} | {} |", cells.join(" | "));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Pooled Spearman correlation between query counts at event cells and the
/// average speed of segments within 1 km of them, over each event's span
/// padded by `pad` bins on both sides (clipped to the horizon). Returns
/// `None` when fewer than three pooled points have both values.
pub fn event_speed_correlation(
    events: &[EventRecord],
    tensor: &ArrivalTimeTensor,
    net: &RoadNetwork,
    speeds: &[crate::speed::SpeedSeries],
    pad: usize,
) -> Result<Option<f64>> {
    let mut counts = Vec::new();
    let mut avg = Vec::new();
    for e in events {
        let center = tensor.grid.cell_center(e.cell());
        let near: Vec<&crate::speed::SpeedSeries> = speeds
            .iter()
            .filter(|s| {
                net.segment(&s.link_id)
                    .map(|seg| distance_m(&seg.midpoint(), &center) <= EVENT_RADIUS_M)
                    .unwrap_or(false)
            })
            .collect();
        if near.is_empty() {
            continue;
        }
        let lo = e.t_s.saturating_sub(pad);
        let hi = (e.t_d + pad).min(tensor.bins - 1);
        for t in lo..=hi {
            let obs: Vec<f64> = near.iter().filter_map(|s| s.values.get(t).copied().flatten()).collect();
            if obs.is_empty() {
                continue;
            }
            counts.push(tensor.get(e.x, e.y, t) as f64);
            avg.push(obs.iter().sum::<f64>() / obs.len() as f64);
        }
    }
    if counts.len() < 3 {
        return Ok(None);
    }
    match spearman(&counts, &avg) {
        Ok(r) => Ok(Some(r)),
        Err(Error::InvalidArgument(_)) => Ok(None),
        Err(e) => Err(e),
    }
}
