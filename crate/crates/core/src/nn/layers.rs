//! Batched LSTM and dense layers with explicit backward passes.
//!
//! LSTM gate columns are ordered `i, f, g, o`. The input weight is stored as
//! one block per input group so that groups can be added or zeroed without
//! touching the others; blocks are accumulated in declaration order after
//! the recurrent term and bias.

use ndarray::{linalg::general_mat_mul, s, Array2, ArrayView2, Axis, Zip};

use super::{Gradients, Init, ParamId, ParamSet};
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through `relu` given its pre-activation.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    Zip::from(pre).and(dy).map_collect(|&p, &d| if p > 0.0 { d } else { 0.0 })
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len().max(1) as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

/// `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Dense {
    pub fn new(ps: &mut ParamSet, prefix: &str, input_dim: usize, output_dim: usize) -> Result<Dense> {
        let w = ps.add(&format!("{prefix}.w"), (input_dim, output_dim), Init::Uniform { fan_in: input_dim })?;
        let b = ps.add(&format!("{prefix}.b"), (1, output_dim), Init::Zeros)?;
        Ok(Dense {
            w,
            b,
            input_dim,
            output_dim,
        })
    }

    pub fn forward(&self, ps: &ParamSet, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "dense input has {} columns, expected {}",
                x.ncols(),
                self.input_dim
            )));
        }
        let mut y = x.dot(ps.value(self.w));
        y += ps.value(self.b);
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, ps: &ParamSet, grads: &mut Gradients, x: ArrayView2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dy, 1.0, grads.get_mut(self.w));
        *grads.get_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&ps.value(self.w).t())
    }
}

#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub hidden: usize,
    /// `(dim, weight)` per input block.
    pub inputs: Vec<(usize, ParamId)>,
    pub w_h: ParamId,
    pub b: ParamId,
}

/// Values recorded by one forward step for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    xs: Vec<Array2<f64>>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// Post-activation gates `[B, 4H]`.
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
}

impl LstmLayer {
    /// Creates the layer's tensors: `{prefix}.wx.{block}` per input block,
    /// `{prefix}.wh` and `{prefix}.b` . Every block uses fan-in `hidden`, so
    /// tensor values do not depend on which blocks exist.
    pub fn new(ps: &mut ParamSet, prefix: &str, blocks: &[(&str, usize)], hidden: usize) -> Result<LstmLayer> {
        let init = Init::Uniform { fan_in: hidden };
        let mut inputs = Vec::with_capacity(blocks.len());
        for (name, dim) in blocks {
            inputs.push((*dim, ps.add(&format!("{prefix}.wx.{name}"), (*dim, 4 * hidden), init)?));
        }
        let w_h = ps.add(&format!("{prefix}.wh"), (hidden, 4 * hidden), init)?;
        let mut bias = Array2::zeros((1, 4 * hidden));
        bias.slice_mut(s![.., hidden..2 * hidden]).fill(1.0);
        let b = ps.push(&format!("{prefix}.b"), bias)?;
        Ok(LstmLayer { hidden, inputs, w_h, b })
    }

    pub fn zero_state(&self, batch: usize) -> (Array2<f64>, Array2<f64>) {
        (Array2::zeros((batch, self.hidden)), Array2::zeros((batch, self.hidden)))
    }

    /// One step. `xs` holds one `[B, dim]` array per input block.
    pub fn step(
        &self,
        ps: &ParamSet,
        xs: &[Array2<f64>],
        h_prev: &Array2<f64>,
        c_prev: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, LstmCache)> {
        let hd = self.hidden;
        let batch = h_prev.nrows();
        if xs.len() != self.inputs.len() {
            return Err(Error::Shape(format!("{} input blocks, expected {}", xs.len(), self.inputs.len())));
        }
        if h_prev.dim() != (batch, hd) || c_prev.dim() != (batch, hd) {
            return Err(Error::Shape(format!(
                "state {:?}/{:?}, expected ({batch}, {hd})",
                h_prev.dim(),
                c_prev.dim()
            )));
        }
        for (x, (dim, _)) in xs.iter().zip(&self.inputs) {
            if x.dim() != (batch, *dim) {
                return Err(Error::Shape(format!("input block {:?}, expected ({batch}, {dim})", x.dim())));
            }
        }
        let mut z = h_prev.dot(ps.value(self.w_h));
        z += ps.value(self.b);
        for (x, (_, w)) in xs.iter().zip(&self.inputs) {
            general_mat_mul(1.0, x, ps.value(*w), 1.0, &mut z);
        }
        let mut gates = z;
        gates.slice_mut(s![.., 0..2 * hd]).mapv_inplace(sigmoid);
        gates.slice_mut(s![.., 2 * hd..3 * hd]).mapv_inplace(f64::tanh);
        gates.slice_mut(s![.., 3 * hd..]).mapv_inplace(sigmoid);
        let i = gates.slice(s![.., 0..hd]);
        let f = gates.slice(s![.., hd..2 * hd]);
        let g = gates.slice(s![.., 2 * hd..3 * hd]);
        let o = gates.slice(s![.., 3 * hd..]);
        let c = &f * c_prev + &i * &g;
        let tanh_c = c.mapv(f64::tanh);
        let h = &o * &tanh_c;
        let cache = LstmCache {
            xs: xs.to_vec(),
            h_prev: h_prev.clone(),
            c_prev: c_prev.clone(),
            gates,
            tanh_c,
        };
        Ok((h, c, cache))
    }

    /// Backward through one step given `dL/dh_t` and `dL/dc_t`. Accumulates
    /// parameter gradients and returns `(dL/dx per block, dL/dh_prev,
    /// dL/dc_prev)`.
    pub fn step_backward(
        &self,
        ps: &ParamSet,
        grads: &mut Gradients,
        cache: &LstmCache,
        dh: &Array2<f64>,
        dc: &Array2<f64>,
    ) -> (Vec<Array2<f64>>, Array2<f64>, Array2<f64>) {
        let hd = self.hidden;
        let gates = &cache.gates;
        let i = gates.slice(s![.., 0..hd]);
        let f = gates.slice(s![.., hd..2 * hd]);
        let g = gates.slice(s![.., 2 * hd..3 * hd]);
        let o = gates.slice(s![.., 3 * hd..]);
        let tc = &cache.tanh_c;
        let dc_total = dc + &Zip::from(dh).and(&o).and(tc).map_collect(|&dh, &o, &t| dh * o * (1.0 - t * t));
        let mut dz = Array2::zeros(gates.dim());
        Zip::from(dz.slice_mut(s![.., 0..hd]))
            .and(&dc_total)
            .and(&g)
            .and(&i)
            .for_each(|d, &dct, &g, &i| *d = dct * g * i * (1.0 - i));
        Zip::from(dz.slice_mut(s![.., hd..2 * hd]))
            .and(&dc_total)
            .and(&cache.c_prev)
            .and(&f)
            .for_each(|d, &dct, &cp, &f| *d = dct * cp * f * (1.0 - f));
        Zip::from(dz.slice_mut(s![.., 2 * hd..3 * hd]))
            .and(&dc_total)
            .and(&i)
            .and(&g)
            .for_each(|d, &dct, &i, &g| *d = dct * i * (1.0 - g * g));
        Zip::from(dz.slice_mut(s![.., 3 * hd..]))
            .and(dh)
            .and(tc)
            .and(&o)
            .for_each(|d, &dh, &t, &o| *d = dh * t * o * (1.0 - o));
        let dc_prev = &dc_total * &f;

        general_mat_mul(1.0, &cache.h_prev.t(), &dz, 1.0, grads.get_mut(self.w_h));
        *grads.get_mut(self.b) += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dh_prev = dz.dot(&ps.value(self.w_h).t());
        let dxs = cache
            .xs
            .iter()
            .zip(&self.inputs)
            .map(|(x, (_, w))| {
                general_mat_mul(1.0, &x.t(), &dz, 1.0, grads.get_mut(*w));
                dz.dot(&ps.value(*w).t())
            })
            .collect();
        (dxs, dh_prev, dc_prev)
    }
}
