//! Aligned per-segment inputs and batch assembly.
//!
//! All series share one bin grid. Window starts index that grid; a window
//! at `s` reads history bins `[s, s + t)` and targets `[s + t, s + t + t')`.
//! Neighbor speeds are normalized with the neighbor's own statistics and
//! missing neighbor bins (or empty slots) read as zero.

use ndarray::{Array2, Array3};

use super::{ModelKind, ModelShape, NEIGHBOR_SLOTS};
use crate::error::{Error, Result};
use crate::impact::QueryImpact;
use crate::network::attributes::{encode_geo, encode_social, Calendar, GEO_DIM, SOCIAL_DIM};
use crate::network::{RoadNetwork, NEIGHBORS_PER_SIDE};
use crate::speed::{window_starts, NormStats, SpeedSeries, WindowKey, WindowSet, WindowSetBuilder};

/// Model inputs for `B` windows. Speeds are normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, t]`
    pub speeds: Array2<f64>,
    /// `[B, t']`
    pub targets: Option<Array2<f64>>,
    /// `[B, t, 10]`
    pub neighbors: Option<Array3<f64>>,
    /// `[B, t', 31]`
    pub attributes: Option<Array3<f64>>,
    /// `ln(1 + QI)` over the target bins, `[B, t']`
    pub qi: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentData {
    pub link_id: String,
    pub stats: NormStats,
    /// Observed speeds in km/h.
    pub raw: Vec<Option<f64>>,
    /// Speeds normalized with `stats`.
    pub values: Vec<Option<f64>>,
    /// Indices into [`ForecastData::segments`]: predecessors then successors.
    pub neighbors: [Option<usize>; NEIGHBOR_SLOTS],
    pub geo: Vec<f64>,
    /// `ln(1 + QI)` per bin.
    pub qi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastData {
    pub t0: i64,
    pub step: i64,
    pub bins: usize,
    /// First bin of the test half.
    pub split: usize,
    pub shape: ModelShape,
    pub segments: Vec<SegmentData>,
    /// Social attributes per bin.
    pub social: Vec<[f64; SOCIAL_DIM]>,
}

impl ForecastData {
    /// Aligns smoothed series (one per network segment, any order) with the
    /// network's neighbor structure, attributes and query impact.
    pub fn build(
        net: &RoadNetwork,
        series: &[SpeedSeries],
        qi: Option<&QueryImpact>,
        calendar: &Calendar,
        split: usize,
        shape: ModelShape,
    ) -> Result<ForecastData> {
        shape.validate()?;
        let first = series
            .first()
            .ok_or_else(|| Error::Missing("no speed series".into()))?;
        let (t0, step, bins) = (first.t0, first.step, first.len());
        for s in series {
            if (s.t0, s.step, s.len()) != (t0, step, bins) {
                return Err(Error::Shape(format!("series {} is not aligned with {}", s.link_id, first.link_id)));
            }
        }
        if split < shape.t + shape.t_prime || split >= bins {
            return Err(Error::InvalidArgument(format!(
                "split {split} leaves no training windows in {bins} bins"
            )));
        }
        if let Some(q) = qi {
            if q.t0 != t0 || q.bin != step || q.bins != bins {
                return Err(Error::Shape("query impact horizon differs from the speed series".into()));
            }
        }
        let mut by_link: Vec<Option<&SpeedSeries>> = vec![None; net.len()];
        for s in series {
            let i = net.index_of(&s.link_id)?;
            by_link[i] = Some(s);
        }
        // positions in `segments` of each network segment that has a series
        let mut position = vec![None; net.len()];
        let mut order = Vec::new();
        for (i, s) in by_link.iter().enumerate() {
            if s.is_some() {
                position[i] = Some(order.len());
                order.push(i);
            }
        }
        let mut segments = Vec::with_capacity(order.len());
        for &i in &order {
            let s = by_link[i].expect("ordered segments have series");
            let seg = &net.segments()[i];
            let stats = NormStats::fit(&s.values[..split]).ok_or_else(|| {
                Error::Missing(format!("training half of {} has no observations", seg.link_id))
            })?;
            let nb = net.select_neighbors(&seg.link_id)?;
            let mut neighbors = [None; NEIGHBOR_SLOTS];
            for (slot, id) in nb.predecessors.iter().enumerate() {
                neighbors[slot] = position[net.index_of(id)?];
            }
            for (slot, id) in nb.successors.iter().enumerate() {
                neighbors[NEIGHBORS_PER_SIDE + slot] = position[net.index_of(id)?];
            }
            let qi_row = match qi {
                Some(q) => {
                    let l = q
                        .link_position(&seg.link_id)
                        .ok_or_else(|| Error::UnknownSegment(seg.link_id.clone()))?;
                    q.row(l).iter().map(|v| v.ln_1p()).collect()
                }
                None => vec![0.0; bins],
            };
            segments.push(SegmentData {
                link_id: seg.link_id.clone(),
                stats,
                raw: s.values.clone(),
                values: s.values.iter().map(|v| v.map(|x| stats.normalize(x))).collect(),
                neighbors,
                geo: encode_geo(seg)?,
                qi: qi_row,
            });
        }
        let social = (0..bins)
            .map(|b| encode_social(t0 + b as i64 * step, calendar))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForecastData {
            t0,
            step,
            bins,
            split,
            shape,
            segments,
            social,
        })
    }

    pub fn span(&self) -> usize {
        self.shape.t + self.shape.t_prime
    }

    /// Fully observed windows whose start lies in `starts`, at `stride`,
    /// for every segment. Returns kept keys and the number dropped.
    pub fn window_keys(&self, starts: std::ops::Range<usize>, stride: usize) -> (Vec<WindowKey>, usize) {
        let mut keys = Vec::new();
        let mut dropped = 0;
        for (link, seg) in self.segments.iter().enumerate() {
            let (s, d) = window_starts(&seg.values, self.shape.t, self.shape.t_prime, stride, starts.clone());
            keys.extend(s.into_iter().map(|start| WindowKey { link, start }));
            dropped += d;
        }
        (keys, dropped)
    }

    /// Windows lying entirely in the training half.
    pub fn train_keys(&self, stride: usize) -> (Vec<WindowKey>, usize) {
        self.window_keys(0..self.split + 1 - self.span(), stride)
    }

    /// Windows whose targets lie entirely in the test half; their history
    /// may reach back into the training half.
    pub fn test_keys(&self, stride: usize) -> (Vec<WindowKey>, usize) {
        let lo = self.split - self.shape.t;
        self.window_keys(lo..self.bins + 1 - self.span(), stride)
    }

    /// Target speeds in km/h.
    pub fn targets_kmh(&self, key: WindowKey) -> Result<Vec<f64>> {
        let seg = &self.segments[key.link];
        let lo = key.start + self.shape.t;
        seg.raw[lo..lo + self.shape.t_prime]
            .iter()
            .map(|v| v.ok_or_else(|| Error::Missing(format!("target bin of {} at {}", seg.link_id, key.start))))
            .collect()
    }

    /// Inputs for `keys` with only the blocks `kind` consumes.
    pub fn batch(&self, keys: &[WindowKey], kind: ModelKind, with_targets: bool) -> Result<Batch> {
        let ModelShape { t, t_prime, .. } = self.shape;
        let n = keys.len();
        let missing = |link: &str, b: usize| Error::Missing(format!("speed of {link} at bin {b}"));
        let mut speeds = Array2::zeros((n, t));
        let mut targets = with_targets.then(|| Array2::zeros((n, t_prime)));
        let mut neighbors = kind.uses_neighbors().then(|| Array3::zeros((n, t, NEIGHBOR_SLOTS)));
        let mut attributes = kind.uses_attributes().then(|| Array3::zeros((n, t_prime, GEO_DIM + SOCIAL_DIM)));
        let mut qi = kind.uses_qi().then(|| Array2::zeros((n, t_prime)));
        for (r, key) in keys.iter().enumerate() {
            let seg = self.segments.get(key.link).ok_or_else(|| Error::Missing(format!("segment index {}", key.link)))?;
            if key.start + t + t_prime > self.bins {
                return Err(Error::InvalidArgument(format!("window at {} runs past the horizon", key.start)));
            }
            for j in 0..t {
                let b = key.start + j;
                speeds[[r, j]] = seg.values[b].ok_or_else(|| missing(&seg.link_id, b))?;
            }
            if let Some(tg) = targets.as_mut() {
                for k in 0..t_prime {
                    let b = key.start + t + k;
                    tg[[r, k]] = seg.values[b].ok_or_else(|| missing(&seg.link_id, b))?;
                }
            }
            if let Some(nb) = neighbors.as_mut() {
                for (slot, n_idx) in seg.neighbors.iter().enumerate() {
                    if let Some(ni) = n_idx {
                        let other = &self.segments[*ni].values;
                        for j in 0..t {
                            nb[[r, j, slot]] = other[key.start + j].unwrap_or(0.0);
                        }
                    }
                }
            }
            if let Some(at) = attributes.as_mut() {
                for k in 0..t_prime {
                    let b = key.start + t + k;
                    for (d, v) in seg.geo.iter().chain(self.social[b].iter()).enumerate() {
                        at[[r, k, d]] = *v;
                    }
                }
            }
            if let Some(q) = qi.as_mut() {
                for k in 0..t_prime {
                    q[[r, k]] = seg.qi[key.start + t + k];
                }
            }
        }
        Ok(Batch {
            speeds,
            targets,
            neighbors,
            attributes,
            qi,
        })
    }

    /// Supervised windows for persistence.
    pub fn window_set(&self, keys: &[WindowKey], dropped: usize) -> WindowSet {
        let mut b = WindowSetBuilder::new(self.shape.t, self.shape.t_prime);
        for seg in &self.segments {
            b.add_link(&seg.link_id, seg.stats);
        }
        for k in keys {
            b.push(k.link, k.start, &self.segments[k.link].values);
        }
        b.dropped = dropped;
        b.finish()
    }
}

/// Denormalized inference-mode predictions `[keys, t']` in km/h.
pub fn predict_kmh(model: &super::Model, data: &ForecastData, keys: &[WindowKey], batch_size: usize) -> Result<Array2<f64>> {
    if model.shape.t != data.shape.t || model.shape.t_prime != data.shape.t_prime {
        return Err(Error::Shape("model and data disagree on window lengths".into()));
    }
    let mut out = Array2::zeros((keys.len(), data.shape.t_prime));
    for (c, chunk) in keys.chunks(batch_size.max(1)).enumerate() {
        let b = data.batch(chunk, model.kind, false)?;
        let z = model.predict(&b)?;
        for (r, key) in chunk.iter().enumerate() {
            let stats = data.segments[key.link].stats;
            for k in 0..data.shape.t_prime {
                out[[c * batch_size.max(1) + r, k]] = stats.denormalize(z[[r, k]]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::network::{build_graph, RoadSegment};

    /// A chain `L0 -> L1 -> ... ` of one-way segments with sine speeds.
    pub(crate) fn chain_data(n: usize, bins: usize) -> (RoadNetwork, Vec<SpeedSeries>) {
        let segs: Vec<RoadSegment> = (0..n)
            .map(|i| {
                let p = |k: usize| GeoPoint::new(116.40 + k as f64 * 0.005, 39.93);
                RoadSegment {
                    link_id: format!("L{i}"),
                    width_class: 30,
                    direction: 2,
                    snode: format!("n{i}"),
                    enode: format!("n{}", i + 1),
                    snode_gps: p(i),
                    enode_gps: p(i + 1),
                    length_km: 0.43,
                    speed_class: 4,
                    lane_class: 2,
                }
            })
            .collect();
        let net = build_graph(segs).unwrap();
        let series = (0..n)
            .map(|i| {
                let vals = (0..bins)
                    .map(|b| Some(40.0 + 10.0 * ((b as f64 + i as f64 * 3.0) * std::f64::consts::TAU / 96.0).sin()))
                    .collect();
                SpeedSeries::new(format!("L{i}"), 1_490_976_000, 900, vals)
            })
            .collect();
        (net, series)
    }

    fn shape() -> ModelShape {
        ModelShape {
            hidden: 4,
            graph_dim: 2,
            qi_hidden: 3,
            t: 6,
            t_prime: 2,
        }
    }

    #[test]
    fn neighbor_slots_follow_graph() {
        let (net, series) = chain_data(4, 40);
        let d = ForecastData::build(&net, &series, None, &Calendar::plain(), 20, shape()).unwrap();
        let l1 = &d.segments[1];
        // L1 has predecessor L0 and successors L2, L3
        assert_eq!(l1.neighbors[0], Some(0));
        assert_eq!(l1.neighbors[1..5], [None; 4]);
        let succ: Vec<usize> = l1.neighbors[5..].iter().flatten().copied().collect();
        assert_eq!(succ.len(), 2);
        assert!(succ.contains(&2) && succ.contains(&3));
    }

    #[test]
    fn key_ranges_respect_split() {
        let (net, series) = chain_data(2, 40);
        let d = ForecastData::build(&net, &series, None, &Calendar::plain(), 20, shape()).unwrap();
        let (train, _) = d.train_keys(1);
        assert!(train.iter().all(|k| k.start + 8 <= 20));
        assert_eq!(train.len(), 2 * 13);
        let (test, _) = d.test_keys(1);
        assert!(test.iter().all(|k| k.start + 6 >= 20 && k.start + 8 <= 40));
        assert_eq!(test.len(), 2 * 19);
    }

    #[test]
    fn batch_contents() {
        let (net, series) = chain_data(3, 40);
        let d = ForecastData::build(&net, &series, None, &Calendar::plain(), 20, shape()).unwrap();
        let key = WindowKey { link: 1, start: 3 };
        let b = d.batch(&[key], ModelKind::Hybrid, true).unwrap();
        let s = d.segments[1].stats;
        assert!((s.denormalize(b.speeds[[0, 0]]) - series[1].values[3].unwrap()).abs() < 1e-9);
        assert!((s.denormalize(b.targets.as_ref().unwrap()[[0, 1]]) - series[1].values[10].unwrap()).abs() < 1e-9);
        let nb = b.neighbors.unwrap();
        assert_eq!(nb[[0, 2, 0]], d.segments[0].values[5].unwrap());
        assert_eq!(nb[[0, 2, 1]], 0.0);
        let at = b.attributes.unwrap();
        assert_eq!(at.dim(), (1, 2, 31));
        assert_eq!(at[[0, 0, 19]], 0.43f64.ln_1p());
        assert!(b.qi.unwrap().iter().all(|v| *v == 0.0));
        let plain = d.batch(&[key], ModelKind::Seq2seq, false).unwrap();
        assert!(plain.neighbors.is_none() && plain.attributes.is_none() && plain.qi.is_none() && plain.targets.is_none());
    }
}
