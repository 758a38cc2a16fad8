//! Directed road graph built from segment records.
//!
//! Every segment is a vertex. An edge `u -> v` exists when some permitted
//! travel direction along `u` ends at a node where a permitted travel
//! direction along `v` begins. Direction codes follow the road table:
//! `0` unknown (treated as two-way), `1` two-way, `2` start node to end node,
//! `3` end node to start node. Self-loops (U-turns on one segment) are not
//! edges.

pub mod attributes;
pub mod pagerank;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

pub use attributes::{encode_attributes, encode_geo, encode_social, Calendar, GEO_DIM, GEO_SCHEMA_VERSION, SOCIAL_DIM};
pub use pagerank::{pagerank, PageRankConfig};

use crate::error::{Error, Result};
use crate::geo::{distance_m, GeoPoint};

/// Maximum neighbours kept on each side of a centre segment.
pub const NEIGHBORS_PER_SIDE: usize = 5;
/// Hop radius of the neighbour search.
pub const NEIGHBOR_HOPS: usize = 3;

pub const WIDTH_CLASSES: [u16; 4] = [15, 30, 55, 130];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub link_id: String,
    /// One of 15, 30, 55, 130.
    pub width_class: u16,
    /// 0..=3, see the module docs.
    pub direction: u8,
    pub snode: String,
    pub enode: String,
    pub snode_gps: GeoPoint,
    pub enode_gps: GeoPoint,
    pub length_km: f64,
    /// 1 (fastest) ..= 8 (slowest).
    pub speed_class: u8,
    /// 1: one lane, 2: two or three, 3: four or more.
    pub lane_class: u8,
}

impl RoadSegment {
    /// Representative point used for proximity queries.
    pub fn midpoint(&self) -> GeoPoint {
        self.snode_gps.midpoint(&self.enode_gps)
    }

    /// Permitted `(from, to)` node traversals.
    pub fn travels(&self) -> Vec<(&str, &str)> {
        let fwd = (self.snode.as_str(), self.enode.as_str());
        let rev = (self.enode.as_str(), self.snode.as_str());
        match self.direction {
            2 => vec![fwd],
            3 => vec![rev],
            _ => vec![fwd, rev],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Error::Validation(format!("segment {}: {what}", self.link_id));
        if self.link_id.is_empty() {
            return Err(Error::Validation("segment with empty link_id".into()));
        }
        if !WIDTH_CLASSES.contains(&self.width_class) {
            return Err(bad(&format!("width class {} not in {WIDTH_CLASSES:?}", self.width_class)));
        }
        if self.direction > 3 {
            return Err(bad(&format!("direction {} not in 0..=3", self.direction)));
        }
        if !(1..=8).contains(&self.speed_class) {
            return Err(bad(&format!("speed class {} not in 1..=8", self.speed_class)));
        }
        if !(1..=3).contains(&self.lane_class) {
            return Err(bad(&format!("lane class {} not in 1..=3", self.lane_class)));
        }
        if !(self.length_km > 0.0 && self.length_km.is_finite()) {
            return Err(bad("length must be positive"));
        }
        if self.snode == self.enode {
            return Err(bad("start and end node coincide"));
        }
        self.snode_gps.validate()?;
        self.enode_gps.validate()
    }
}

/// Top-ranked predecessors and successors of one segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub center: String,
    pub predecessors: Vec<String>,
    pub successors: Vec<String>,
}

/// Immutable road graph with PageRank scores.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    segments: Vec<RoadSegment>,
    index: HashMap<String, usize>,
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
    pagerank: Vec<f64>,
}

/// Node ids whose coordinates disagree between segments by more than this are rejected.
const NODE_TOLERANCE_M: f64 = 1.0;

/// Validates the records and builds the graph. Segments are stored sorted by
/// `link_id`, so the result does not depend on input order. PageRank is
/// computed with the default configuration.
pub fn build_graph(segments: Vec<RoadSegment>) -> Result<RoadNetwork> {
    let mut segments = segments;
    segments.sort_by(|a, b| a.link_id.cmp(&b.link_id));
    for s in &segments {
        s.validate()?;
    }
    if let Some(w) = segments.windows(2).find(|w| w[0].link_id == w[1].link_id) {
        return Err(Error::Validation(format!("duplicate link_id {}", w[0].link_id)));
    }

    // A node id must denote one place; conflicting or empty ids dangle.
    let mut nodes: BTreeMap<&str, GeoPoint> = BTreeMap::new();
    let mut offenders = BTreeSet::new();
    for s in &segments {
        for (id, gps) in [(&s.snode, s.snode_gps), (&s.enode, s.enode_gps)] {
            if id.is_empty() {
                offenders.insert(format!("{} (empty node id)", s.link_id));
                continue;
            }
            match nodes.get(id.as_str()) {
                Some(prev) if distance_m(prev, &gps) > NODE_TOLERANCE_M => {
                    offenders.insert(id.clone());
                }
                Some(_) => {}
                None => {
                    nodes.insert(id, gps);
                }
            }
        }
    }
    if !offenders.is_empty() {
        let list: Vec<String> = offenders.into_iter().collect();
        return Err(Error::Validation(format!("dangling node references: {}", list.join(", "))));
    }

    let n = segments.len();
    let mut starts_at: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in segments.iter().enumerate() {
        for (from, _) in s.travels() {
            starts_at.entry(from).or_default().push(i);
        }
    }
    let mut succ_sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (u, s) in segments.iter().enumerate() {
        for (_, to) in s.travels() {
            for &v in starts_at.get(to).map(Vec::as_slice).unwrap_or(&[]) {
                if v != u {
                    succ_sets[u].insert(v);
                }
            }
        }
    }
    let succ: Vec<Vec<usize>> = succ_sets.into_iter().map(|s| s.into_iter().collect()).collect();
    let mut pred = vec![Vec::new(); n];
    for (u, vs) in succ.iter().enumerate() {
        for &v in vs {
            pred[v].push(u);
        }
    }

    let index = segments
        .iter()
        .enumerate()
        .map(|(i, s)| (s.link_id.clone(), i))
        .collect();
    let mut net = RoadNetwork {
        segments,
        index,
        succ,
        pred,
        pagerank: Vec::new(),
    };
    if n > 0 {
        net.pagerank = pagerank(&net, &PageRankConfig::default())?;
    }
    Ok(net)
}

impl RoadNetwork {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Segments in `link_id` order.
    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn index_of(&self, link_id: &str) -> Result<usize> {
        self.index
            .get(link_id)
            .copied()
            .ok_or_else(|| Error::UnknownSegment(link_id.to_string()))
    }

    pub fn segment(&self, link_id: &str) -> Result<&RoadSegment> {
        Ok(&self.segments[self.index_of(link_id)?])
    }

    pub fn successors(&self, i: usize) -> &[usize] {
        &self.succ[i]
    }

    pub fn predecessors(&self, i: usize) -> &[usize] {
        &self.pred[i]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.succ[u].binary_search(&v).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.succ.iter().map(Vec::len).sum()
    }

    /// PageRank score per segment, in segment order.
    pub fn pagerank_scores(&self) -> &[f64] {
        &self.pagerank
    }

    pub fn pagerank_of(&self, link_id: &str) -> Result<f64> {
        Ok(self.pagerank[self.index_of(link_id)?])
    }

    /// Recomputes PageRank with a custom configuration.
    pub fn recompute_pagerank(&mut self, cfg: &PageRankConfig) -> Result<()> {
        self.pagerank = pagerank(self, cfg)?;
        Ok(())
    }

    fn within_hops(&self, center: usize, hops: usize, forward: bool) -> Vec<usize> {
        let mut seen = vec![false; self.len()];
        seen[center] = true;
        let mut out = Vec::new();
        let mut queue = VecDeque::from([(center, 0usize)]);
        while let Some((u, depth)) = queue.pop_front() {
            if depth == hops {
                continue;
            }
            let next = if forward { &self.succ[u] } else { &self.pred[u] };
            for &v in next {
                if !seen[v] {
                    seen[v] = true;
                    out.push(v);
                    queue.push_back((v, depth + 1));
                }
            }
        }
        out
    }

    fn rank_order(&self, mut ids: Vec<usize>) -> Vec<String> {
        ids.sort_by(|&a, &b| {
            self.pagerank[b]
                .total_cmp(&self.pagerank[a])
                .then_with(|| self.segments[a].link_id.cmp(&self.segments[b].link_id))
        });
        ids.truncate(NEIGHBORS_PER_SIDE);
        ids.into_iter().map(|i| self.segments[i].link_id.clone()).collect()
    }

    /// Up to five predecessors and five successors within three hops, ranked
    /// by descending PageRank with ties broken by `link_id`.
    pub fn select_neighbors(&self, center: &str) -> Result<NeighborSet> {
        self.select_neighbors_within(center, NEIGHBOR_HOPS)
    }

    pub fn select_neighbors_within(&self, center: &str, hops: usize) -> Result<NeighborSet> {
        let c = self.index_of(center)?;
        Ok(NeighborSet {
            center: center.to_string(),
            predecessors: self.rank_order(self.within_hops(c, hops, false)),
            successors: self.rank_order(self.within_hops(c, hops, true)),
        })
    }
}
