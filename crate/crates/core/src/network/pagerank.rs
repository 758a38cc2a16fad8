use serde::{Deserialize, Serialize};

use super::RoadNetwork;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageRankConfig {
    pub damping: f64,
    /// Stop once the L1 change between iterations falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PageRankConfig {
    fn default() -> Self {
        PageRankConfig {
            damping: 0.85,
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

/// Synchronous power iteration with uniform teleport. Rank held by segments
/// without successors is spread uniformly over all segments.
pub fn pagerank(net: &RoadNetwork, cfg: &PageRankConfig) -> Result<Vec<f64>> {
    let n = net.len();
    if n == 0 {
        return Err(Error::InvalidArgument("pagerank of an empty graph".into()));
    }
    if !(0.0..1.0).contains(&cfg.damping) {
        return Err(Error::InvalidArgument(format!("damping {} outside [0, 1)", cfg.damping)));
    }
    let nf = n as f64;
    let mut rank = vec![1.0 / nf; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        let dangling: f64 = (0..n)
            .filter(|&u| net.successors(u).is_empty())
            .map(|u| rank[u])
            .sum();
        let base = (1.0 - cfg.damping) / nf + cfg.damping * dangling / nf;
        next.iter_mut().for_each(|r| *r = base);
        for (u, &r) in rank.iter().enumerate() {
            let out = net.successors(u);
            if !out.is_empty() {
                let share = cfg.damping * r / out.len() as f64;
                for &v in out {
                    next[v] += share;
                }
            }
        }
        // renormalise so rounding never lets the total drift
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|r| *r /= total);
        residual = rank.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut rank, &mut next);
        if residual < cfg.tol {
            return Ok(rank);
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iter,
        residual,
    })
}
