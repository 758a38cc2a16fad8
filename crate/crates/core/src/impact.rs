//! Query impact: per-segment, per-bin influence of queries whose
//! destinations lie near a segment, decaying exponentially with the
//! distance from the segment midpoint to the query's start-to-destination
//! path.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{distance_m, point_to_segment_m, GeoPoint, GeoSegment, EARTH_RADIUS_M};
use crate::network::RoadNetwork;
use crate::query::Query;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpactParams {
    /// Decay scale in meters.
    pub sigma_m: f64,
    /// Destination neighborhood radius in meters.
    pub radius_m: f64,
}

impl Default for ImpactParams {
    fn default() -> Self {
        ImpactParams {
            sigma_m: 150.0,
            radius_m: 1000.0,
        }
    }
}

impl ImpactParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_m > 0.0 && self.sigma_m.is_finite()) {
            return Err(Error::Config(format!("sigma_m must be positive, got {}", self.sigma_m)));
        }
        if !(self.radius_m > 0.0 && self.radius_m.is_finite()) {
            return Err(Error::Config(format!("radius_m must be positive, got {}", self.radius_m)));
        }
        Ok(())
    }
}

/// Exponential decay `exp(-d / sigma)`.
pub fn h(d: f64, sigma: f64) -> Result<f64> {
    if d.is_nan() || d < 0.0 {
        return Err(Error::InvalidArgument(format!("distance must be non-negative, got {d}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    Ok((-d / sigma).exp())
}

/// Uniform lon/lat hash over segment midpoints.
///
/// Cells are at least `radius` wide in both directions at every latitude the
/// midpoints reach, so a ring of `ceil(r / radius)` cells around the query
/// cell covers every midpoint within `r`. Candidates are then filtered with
/// the exact distance, so results equal a linear scan.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    radius_m: f64,
    cell_lon: f64,
    cell_lat: f64,
    points: Vec<GeoPoint>,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl SpatialIndex {
    pub fn new(points: Vec<GeoPoint>, radius_m: f64) -> Result<SpatialIndex> {
        if !(radius_m > 0.0 && radius_m.is_finite()) {
            return Err(Error::InvalidArgument(format!("index radius must be positive, got {radius_m}")));
        }
        let dlat = (radius_m / EARTH_RADIUS_M).to_degrees();
        let max_lat = points.iter().map(|p| p.lat.abs()).fold(0.0, f64::max);
        let phi = (max_lat + dlat).min(89.0).to_radians();
        let cell_lat = dlat;
        let cell_lon = dlat / phi.cos();
        let mut index = SpatialIndex {
            radius_m,
            cell_lon,
            cell_lat,
            points,
            buckets: HashMap::new(),
        };
        for i in 0..index.points.len() {
            let key = index.key(&index.points[i]);
            index.buckets.entry(key).or_default().push(i);
        }
        Ok(index)
    }

    fn key(&self, p: &GeoPoint) -> (i64, i64) {
        (
            (p.lon / self.cell_lon).floor() as i64,
            (p.lat / self.cell_lat).floor() as i64,
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices of points within `radius_m` of `p`, ascending.
    pub fn within(&self, p: &GeoPoint, radius_m: f64) -> Vec<usize> {
        let ring = (radius_m / self.radius_m).ceil().max(1.0) as i64;
        let (kx, ky) = self.key(p);
        let mut out = Vec::new();
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                if let Some(bucket) = self.buckets.get(&(kx + dx, ky + dy)) {
                    out.extend(
                        bucket
                            .iter()
                            .copied()
                            .filter(|&i| distance_m(p, &self.points[i]) <= radius_m),
                    );
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Segment midpoint index for one network.
pub fn segment_index(net: &RoadNetwork, radius_m: f64) -> Result<SpatialIndex> {
    SpatialIndex::new(net.segments().iter().map(|s| s.midpoint()).collect(), radius_m)
}

/// Link ids of segments whose midpoint is within `radius_m` of `p`, in
/// network order.
pub fn nearroad(net: &RoadNetwork, p: &GeoPoint, radius_m: f64) -> Result<Vec<String>> {
    p.validate()?;
    if net.is_empty() {
        return Ok(Vec::new());
    }
    let index = segment_index(net, radius_m)?;
    Ok(index
        .within(p, radius_m)
        .into_iter()
        .map(|i| net.segments()[i].link_id.clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryImpactSeries {
    pub link_id: String,
    pub t0: i64,
    pub bin: i64,
    pub qi: Vec<f64>,
}

/// Fixed-point scale of accumulated impact: one unit is `2^-64`.
const FIXED_ONE: f64 = 18_446_744_073_709_551_616.0;

fn to_fixed(v: f64) -> i128 {
    (v * FIXED_ONE).round() as i128
}

fn from_fixed(q: i128) -> f64 {
    q as f64 / FIXED_ONE
}

/// Dense impact of a query set on every segment of a network, in network
/// order.
///
/// Contributions accumulate in `2^-64` fixed point, so the map of a union of
/// query sets equals the merge of their maps bit for bit, whatever the
/// partition or order.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryImpact {
    pub t0: i64,
    pub bin: i64,
    pub bins: usize,
    pub link_ids: Vec<String>,
    /// `values[link * bins + t]`, fixed point.
    values: Vec<i128>,
    /// Queries whose arrival time fell outside the horizon.
    pub skipped: usize,
}

impl QueryImpact {
    pub fn zeros(link_ids: Vec<String>, t0: i64, bin: i64, bins: usize) -> QueryImpact {
        let n = link_ids.len() * bins;
        QueryImpact {
            t0,
            bin,
            bins,
            link_ids,
            values: vec![0; n],
            skipped: 0,
        }
    }

    pub fn get(&self, link: usize, t: usize) -> f64 {
        from_fixed(self.values[link * self.bins + t])
    }

    pub fn set(&mut self, link: usize, t: usize, v: f64) {
        self.values[link * self.bins + t] = to_fixed(v);
    }

    pub fn row(&self, link: usize) -> Vec<f64> {
        self.values[link * self.bins..(link + 1) * self.bins]
            .iter()
            .map(|&q| from_fixed(q))
            .collect()
    }

    pub fn link_position(&self, link_id: &str) -> Option<usize> {
        self.link_ids.iter().position(|l| l == link_id)
    }

    pub fn series(&self, link: usize) -> QueryImpactSeries {
        QueryImpactSeries {
            link_id: self.link_ids[link].clone(),
            t0: self.t0,
            bin: self.bin,
            qi: self.row(link),
        }
    }

    pub fn max(&self) -> f64 {
        from_fixed(self.values.iter().copied().max().unwrap_or(0).max(0))
    }

    /// Non-zero entries as `(link, t, qi)` in link-then-time order.
    pub fn nonzero(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0)
            .map(|(i, v)| (i / self.bins, i % self.bins, from_fixed(*v)))
    }

    /// Entrywise addition.
    pub fn merge(&mut self, other: &QueryImpact) -> Result<()> {
        if self.link_ids != other.link_ids || self.bins != other.bins || self.t0 != other.t0 || self.bin != other.bin {
            return Err(Error::Shape("query impact maps cover different segments or horizons".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        self.skipped += other.skipped;
        Ok(())
    }
}

pub fn compute_query_impact(
    queries: &[Query],
    net: &RoadNetwork,
    params: &ImpactParams,
    t0: i64,
    bin: i64,
    bins: usize,
) -> Result<QueryImpact> {
    params.validate()?;
    let link_ids: Vec<String> = net.segments().iter().map(|s| s.link_id.clone()).collect();
    let mut qi = QueryImpact::zeros(link_ids, t0, bin, bins);
    if net.is_empty() {
        return Ok(qi);
    }
    let index = segment_index(net, params.radius_m)?;
    let mids: Vec<GeoPoint> = net.segments().iter().map(|s| s.midpoint()).collect();
    for q in queries {
        let Some(t) = q.arrival_bin(t0, bin, bins) else {
            qi.skipped += 1;
            continue;
        };
        let path = GeoSegment::new(q.start, q.dest);
        for l in index.within(&q.dest, params.radius_m) {
            let d = point_to_segment_m(&mids[l], &path);
            qi.values[l * bins + t] += to_fixed(h(d, params.sigma_m)?);
        }
    }
    Ok(qi)
}

/// Splits the queries into `shards` contiguous chunks, computes each on its
/// own thread and merges in shard order.
pub fn compute_query_impact_sharded(
    queries: &[Query],
    net: &RoadNetwork,
    params: &ImpactParams,
    t0: i64,
    bin: i64,
    bins: usize,
    shards: usize,
) -> Result<QueryImpact> {
    let shards = shards.max(1);
    let chunk = queries.len().div_ceil(shards).max(1);
    let parts: Vec<Result<QueryImpact>> = std::thread::scope(|s| {
        let handles: Vec<_> = queries
            .chunks(chunk)
            .map(|c| s.spawn(move || compute_query_impact(c, net, params, t0, bin, bins)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("query impact shard panicked"))
            .collect()
    });
    let mut total = compute_query_impact(&[], net, params, t0, bin, bins)?;
    for p in parts {
        total.merge(&p?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_graph, RoadSegment};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ORIGIN: GeoPoint = GeoPoint::new(116.40, 39.93);

    fn segment_at(id: usize, a: GeoPoint, b: GeoPoint) -> RoadSegment {
        RoadSegment {
            link_id: format!("L{id:04}"),
            width_class: 30,
            direction: 2,
            snode: format!("s{id}"),
            enode: format!("e{id}"),
            snode_gps: a,
            enode_gps: b,
            length_km: distance_m(&a, &b).max(1.0) / 1000.0,
            speed_class: 5,
            lane_class: 2,
        }
    }

    fn random_network(n: usize, spread_m: f64, rng: &mut ChaCha8Rng) -> RoadNetwork {
        let segs = (0..n)
            .map(|i| {
                let a = ORIGIN.offset_m(rng.random_range(-spread_m..spread_m), rng.random_range(-spread_m..spread_m));
                let b = a.offset_m(rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0));
                segment_at(i, a, b)
            })
            .collect();
        build_graph(segs).unwrap()
    }

    fn query(start: GeoPoint, dest: GeoPoint, t_d: f64) -> Query {
        Query {
            t_s: t_d - 600.0,
            t_d,
            start_word: "a".into(),
            dest_word: "b".into(),
            start,
            dest,
            cell_s: None,
            cell_d: None,
        }
    }

    fn random_queries(n: usize, spread_m: f64, bins: usize, rng: &mut ChaCha8Rng) -> Vec<Query> {
        (0..n)
            .map(|_| {
                let s = ORIGIN.offset_m(rng.random_range(-spread_m..spread_m), rng.random_range(-spread_m..spread_m));
                let d = ORIGIN.offset_m(rng.random_range(-spread_m..spread_m), rng.random_range(-spread_m..spread_m));
                query(s, d, rng.random_range(0.0..(bins as f64 * 900.0)))
            })
            .collect()
    }

    #[test]
    fn decay_values() {
        assert_eq!(h(0.0, 150.0).unwrap(), 1.0);
        assert!((h(150.0, 150.0).unwrap() - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert_eq!(h(f64::INFINITY, 150.0).unwrap(), 0.0);
        assert!(h(-1.0, 150.0).is_err());
        let mut prev = f64::INFINITY;
        for i in 0..1000 {
            let v = h(i as f64 * 7.3, 150.0).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn empty_network() {
        let net = build_graph(Vec::new()).unwrap();
        assert!(nearroad(&net, &ORIGIN, 1000.0).unwrap().is_empty());
    }

    #[test]
    fn boundary_midpoint_included() {
        let mid = ORIGIN.offset_m(999.0, 0.0);
        let seg = segment_at(0, mid.offset_m(-50.0, 0.0), mid.offset_m(50.0, 0.0));
        let actual_mid = seg.midpoint();
        let net = build_graph(vec![seg]).unwrap();
        let d = distance_m(&ORIGIN, &actual_mid);
        assert!((d - 999.0).abs() < 0.5, "{d}");
        assert_eq!(nearroad(&net, &ORIGIN, 1000.0).unwrap(), vec!["L0000".to_string()]);
        assert!(nearroad(&net, &ORIGIN, 998.0).unwrap().is_empty());
    }

    #[test]
    fn index_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = random_network(500, 6000.0, &mut rng);
        for _ in 0..200 {
            let p = ORIGIN.offset_m(rng.random_range(-7000.0..7000.0), rng.random_range(-7000.0..7000.0));
            for radius in [300.0, 1000.0, 2500.0] {
                let brute: Vec<String> = net
                    .segments()
                    .iter()
                    .filter(|s| distance_m(&p, &s.midpoint()) <= radius)
                    .map(|s| s.link_id.clone())
                    .collect();
                assert_eq!(nearroad(&net, &p, radius).unwrap(), brute);
            }
        }
    }

    #[test]
    fn no_queries_give_zero_impact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = random_network(20, 2000.0, &mut rng);
        let qi = compute_query_impact(&[], &net, &ImpactParams::default(), 0, 900, 10).unwrap();
        assert_eq!(qi.nonzero().count(), 0);
    }

    #[test]
    fn midpoint_on_query_path_scores_one() {
        let a = ORIGIN;
        let b = ORIGIN.offset_m(600.0, 0.0);
        let seg = segment_at(0, a.offset_m(300.0, -100.0), a.offset_m(300.0, 100.0));
        let net = build_graph(vec![seg]).unwrap();
        let q = query(a, b, 2.5 * 900.0);
        let qi = compute_query_impact(&[q], &net, &ImpactParams::default(), 0, 900, 5).unwrap();
        assert!((qi.get(0, 2) - 1.0).abs() < 1e-9, "{}", qi.get(0, 2));
        assert_eq!(qi.nonzero().count(), 1);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = random_network(50, 2500.0, &mut rng);
        let bins = 12;
        let qs = random_queries(200, 2500.0, bins, &mut rng);
        let p = ImpactParams::default();
        let qi = compute_query_impact(&qs, &net, &p, 0, 900, bins).unwrap();
        let mut oracle = vec![vec![0.0; bins]; net.len()];
        for q in &qs {
            let t = (q.t_d / 900.0).floor() as usize;
            for (l, s) in net.segments().iter().enumerate() {
                let m = s.midpoint();
                if distance_m(&q.dest, &m) <= p.radius_m {
                    let d = point_to_segment_m(&m, &GeoSegment::new(q.start, q.dest));
                    oracle[l][t] += (-d / p.sigma_m).exp();
                }
            }
        }
        for (l, row) in oracle.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                assert!((qi.get(l, t) - v).abs() < 1e-12, "({l}, {t})");
            }
        }
    }

    #[test]
    fn sharding_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = random_network(30, 2000.0, &mut rng);
        let qs = random_queries(300, 2000.0, 8, &mut rng);
        let p = ImpactParams::default();
        let a = compute_query_impact_sharded(&qs, &net, &p, 0, 900, 8, 4).unwrap();
        let b = compute_query_impact_sharded(&qs, &net, &p, 0, 900, 8, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, compute_query_impact(&qs, &net, &p, 0, 900, 8).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn additive_bounded_and_monotone_in_sigma(seed in 0u64..1000, n_a in 0usize..40, n_b in 0usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = random_network(15, 1500.0, &mut rng);
            let qa = random_queries(n_a, 1500.0, 6, &mut rng);
            let qb = random_queries(n_b, 1500.0, 6, &mut rng);
            let p = ImpactParams::default();
            let a = compute_query_impact(&qa, &net, &p, 0, 900, 6).unwrap();
            let b = compute_query_impact(&qb, &net, &p, 0, 900, 6).unwrap();
            let all: Vec<Query> = qa.iter().chain(&qb).cloned().collect();
            let ab = compute_query_impact(&all, &net, &p, 0, 900, 6).unwrap();
            let mut sum = a.clone();
            sum.merge(&b).unwrap();
            let wide = compute_query_impact(&all, &net, &ImpactParams { sigma_m: 300.0, ..p }, 0, 900, 6).unwrap();
            let n = all.len() as f64;
            for l in 0..net.len() {
                for t in 0..6 {
                    let v = ab.get(l, t);
                    prop_assert_eq!(v.to_bits(), sum.get(l, t).to_bits());
                    prop_assert!((0.0..=n).contains(&v));
                    prop_assert!(wide.get(l, t) >= v);
                }
                let mid = net.segments()[l].midpoint();
                if all.iter().all(|q| distance_m(&q.dest, &mid) > p.radius_m) {
                    prop_assert!(ab.row(l).iter().all(|v| *v == 0.0));
                }
            }
        }
    }
}
