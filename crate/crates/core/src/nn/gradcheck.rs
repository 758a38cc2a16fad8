//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub n_coords: usize,
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            n_coords: 50,
            step: 1e-4,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checks: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |c| c.rel_error)
    }

    pub fn failures(&self) -> Vec<&CoordCheck> {
        self.checks.iter().filter(|c| !(c.rel_error < self.tol)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// `Err` listing every failing coordinate if any exceeds tolerance.
    pub fn into_result(self) -> Result<GradCheckReport> {
        if self.passed() {
            return Ok(self);
        }
        let list: Vec<String> = self
            .failures()
            .iter()
            .map(|c| format!("{}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}", c.tensor, c.index, c.analytic, c.numeric, c.rel_error))
            .collect();
        Err(Error::GradCheck(list.join("; ")))
    }
}

/// Picks coordinates: one per tensor first (in order, while budget lasts),
/// then uniformly over all values.
fn pick_coords(params: &ParamSet, n: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut out = Vec::with_capacity(n);
    if total == 0 {
        return out;
    }
    for (k, &len) in sizes.iter().enumerate() {
        if out.len() == n {
            break;
        }
        if len > 0 {
            out.push((ParamId(k), rng.random_range(0..len)));
        }
    }
    while out.len() < n {
        let mut flat = rng.random_range(0..total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        out.push((ParamId(k), flat));
    }
    out
}

/// Compares `analytic` against central differences of `loss` at
/// `config.n_coords` sampled coordinates. Relative error is
/// `|a - fd| / max(1, |a|, |fd|)`. `params` is restored before returning.
pub fn gradcheck<F>(params: &mut ParamSet, analytic: &Gradients, mut loss: F, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if analytic.0.len() != params.len() {
        return Err(Error::Shape("gradient count does not match parameter count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let coords = pick_coords(params, config.n_coords, &mut rng);
    let mut checks = Vec::with_capacity(coords.len());
    for (id, index) in coords {
        let orig = params.coord(id, index);
        params.set_coord(id, index, orig + config.step);
        let up = loss(params);
        params.set_coord(id, index, orig - config.step);
        let down = loss(params);
        params.set_coord(id, index, orig);
        let numeric = (up? - down?) / (2.0 * config.step);
        let a = analytic.get(id).as_slice().map(|s| s[index]).unwrap_or_else(|| {
            let g = analytic.get(id);
            g[[index / g.ncols(), index % g.ncols()]]
        });
        let rel_error = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        checks.push(CoordCheck {
            tensor: params.tensor(id).name.clone(),
            index,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    Ok(GradCheckReport {
        tol: config.tol,
        checks,
    })
}
