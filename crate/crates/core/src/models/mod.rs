//! Encoder-decoder forecasters and their auxiliary-input extensions.
//!
//! Every variant shares the same core: an LSTM encoder over the normalized
//! speed history, an LSTM decoder initialized from the encoder's final
//! state, and a dense head mapping each decoder hidden state to one speed.
//! Extensions only add input blocks:
//!
//! - spatial (`seq2seq_nb`): each encoder step also sees
//!   `relu(W_g n_s + b_g)`, where `n_s` is the ordered vector of 5
//!   predecessor and 5 successor speeds at that step;
//! - attributes (`seq2seq_at`): each decoder step also sees the 25
//!   geographic and 6 social values for its target bin;
//! - query impact (`seq2seq_qi`): an LSTM runs over `ln(1 + QI)` of the
//!   target bins and its final hidden state joins every decoder step;
//! - `hybrid` has all three.
//!
//! Zeroing the extension tensors makes every variant compute exactly the
//! plain model's output for the same seed.

pub mod data;
pub mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::attributes::{GEO_DIM, SOCIAL_DIM};
use crate::nn::{mse, relu, relu_backward, Dense, Gradients, LstmCache, LstmLayer, ParamSet};

pub use data::{predict_kmh, Batch, ForecastData, SegmentData};
pub use train::{train, EpochLog, TrainOutcome, TrainingConfig};

/// Ordered neighbor slots: predecessors then successors.
pub const NEIGHBOR_SLOTS: usize = 10;
pub const ATTR_DIM: usize = GEO_DIM + SOCIAL_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Seq2seq,
    Seq2seqAt,
    Seq2seqNb,
    Seq2seqQi,
    Hybrid,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Seq2seq,
        ModelKind::Seq2seqAt,
        ModelKind::Seq2seqNb,
        ModelKind::Seq2seqQi,
        ModelKind::Hybrid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Seq2seq => "seq2seq",
            ModelKind::Seq2seqAt => "seq2seq_at",
            ModelKind::Seq2seqNb => "seq2seq_nb",
            ModelKind::Seq2seqQi => "seq2seq_qi",
            ModelKind::Hybrid => "hybrid",
        }
    }

    /// Display name used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Seq2seq => "Seq2Seq",
            ModelKind::Seq2seqAt => "Seq2Seq+AT",
            ModelKind::Seq2seqNb => "Seq2Seq+NB",
            ModelKind::Seq2seqQi => "Seq2Seq+QI",
            ModelKind::Hybrid => "Hybrid",
        }
    }

    pub fn uses_attributes(self) -> bool {
        matches!(self, ModelKind::Seq2seqAt | ModelKind::Hybrid)
    }

    pub fn uses_neighbors(self) -> bool {
        matches!(self, ModelKind::Seq2seqNb | ModelKind::Hybrid)
    }

    pub fn uses_qi(self) -> bool {
        matches!(self, ModelKind::Seq2seqQi | ModelKind::Hybrid)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// Auxiliary parameter groups, for ablation and audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AuxGroup {
    Attributes,
    Spatial,
    QueryImpact,
}

/// The auxiliary group a tensor belongs to, `None` for the shared core.
pub fn aux_group(tensor: &str) -> Option<AuxGroup> {
    if tensor == "decoder.wx.attr" {
        Some(AuxGroup::Attributes)
    } else if tensor.starts_with("graph.") || tensor == "encoder.wx.graph" {
        Some(AuxGroup::Spatial)
    } else if tensor.starts_with("qi_encoder.") || tensor == "decoder.wx.qi" {
        Some(AuxGroup::QueryImpact)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub hidden: usize,
    pub graph_dim: usize,
    pub qi_hidden: usize,
    pub t: usize,
    pub t_prime: usize,
}

impl Default for ModelShape {
    /// Desk profile.
    fn default() -> Self {
        ModelShape {
            hidden: 32,
            graph_dim: 8,
            qi_hidden: 16,
            t: 96,
            t_prime: 8,
        }
    }
}

impl ModelShape {
    /// Full-capacity profile with 128 hidden units.
    pub fn full() -> Self {
        ModelShape {
            hidden: 128,
            graph_dim: 16,
            qi_hidden: 32,
            ..ModelShape::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.graph_dim == 0 || self.qi_hidden == 0 || self.t == 0 || self.t_prime == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layers {
    encoder: LstmLayer,
    graph: Option<Dense>,
    qi_encoder: Option<LstmLayer>,
    decoder: LstmLayer,
    head: Dense,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub shape: ModelShape,
    pub params: ParamSet,
    layers: Layers,
}

/// Values recorded by [`Model::forward`] for [`Model::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    teacher_forcing: bool,
    enc: Vec<LstmCache>,
    /// Neighbor inputs and graph pre-activations per encoder step.
    graph: Vec<(Array2<f64>, Array2<f64>)>,
    qi: Vec<LstmCache>,
    dec: Vec<LstmCache>,
    dec_h: Vec<Array2<f64>>,
}

impl Model {
    pub fn new(kind: ModelKind, shape: ModelShape, seed: u64) -> Result<Model> {
        shape.validate()?;
        let mut ps = ParamSet::new(seed);
        let h = shape.hidden;
        let mut enc_blocks = vec![("speed", 1)];
        if kind.uses_neighbors() {
            enc_blocks.push(("graph", shape.graph_dim));
        }
        let encoder = LstmLayer::new(&mut ps, "encoder", &enc_blocks, h)?;
        let graph = if kind.uses_neighbors() {
            Some(Dense::new(&mut ps, "graph", NEIGHBOR_SLOTS, shape.graph_dim)?)
        } else {
            None
        };
        let qi_encoder = if kind.uses_qi() {
            Some(LstmLayer::new(&mut ps, "qi_encoder", &[("qi", 1)], shape.qi_hidden)?)
        } else {
            None
        };
        let mut dec_blocks = vec![("speed", 1)];
        if kind.uses_attributes() {
            dec_blocks.push(("attr", ATTR_DIM));
        }
        if kind.uses_qi() {
            dec_blocks.push(("qi", shape.qi_hidden));
        }
        let decoder = LstmLayer::new(&mut ps, "decoder", &dec_blocks, h)?;
        let head = Dense::new(&mut ps, "head", h, 1)?;
        Ok(Model {
            kind,
            shape,
            params: ps,
            layers: Layers {
                encoder,
                graph,
                qi_encoder,
                decoder,
                head,
            },
        })
    }

    /// Rebuilds a model around loaded parameters, checking that names and
    /// shapes match the architecture exactly.
    pub fn with_params(kind: ModelKind, shape: ModelShape, params: ParamSet) -> Result<Model> {
        let mut model = Model::new(kind, shape, params.seed)?;
        let expected: Vec<(&str, (usize, usize))> = model.params.tensors().iter().map(|t| (t.name.as_str(), t.shape())).collect();
        let got: Vec<(&str, (usize, usize))> = params.tensors().iter().map(|t| (t.name.as_str(), t.shape())).collect();
        if expected != got {
            return Err(Error::Shape(format!(
                "checkpoint tensors do not match a {kind} model of shape {shape:?}"
            )));
        }
        model.params = params;
        Ok(model)
    }

    /// Zeroes every auxiliary tensor. Returns how many were zeroed.
    pub fn zero_auxiliary(&mut self) -> usize {
        let mut n = 0;
        for t in self.params.tensors_mut() {
            if aux_group(&t.name).is_some() {
                t.value.fill(0.0);
                n += 1;
            }
        }
        n
    }

    fn check_batch(&self, b: &Batch, need_targets: bool) -> Result<usize> {
        let n = b.speeds.nrows();
        let ModelShape { t, t_prime, .. } = self.shape;
        if b.speeds.dim() != (n, t) {
            return Err(Error::Shape(format!("speed history {:?}, expected ({n}, {t})", b.speeds.dim())));
        }
        if need_targets {
            match &b.targets {
                Some(tg) if tg.dim() == (n, t_prime) => {}
                Some(tg) => return Err(Error::Shape(format!("targets {:?}, expected ({n}, {t_prime})", tg.dim()))),
                None => return Err(Error::Missing("targets required for teacher forcing".into())),
            }
        }
        let missing = |what: &str| Error::Missing(format!("{what} input required by {}", self.kind));
        if self.kind.uses_neighbors() {
            let nb = b.neighbors.as_ref().ok_or_else(|| missing("neighbor"))?;
            if nb.dim() != (n, t, NEIGHBOR_SLOTS) {
                return Err(Error::Shape(format!("neighbors {:?}, expected ({n}, {t}, {NEIGHBOR_SLOTS})", nb.dim())));
            }
        }
        if self.kind.uses_attributes() {
            let at = b.attributes.as_ref().ok_or_else(|| missing("attribute"))?;
            if at.dim() != (n, t_prime, ATTR_DIM) {
                return Err(Error::Shape(format!("attributes {:?}, expected ({n}, {t_prime}, {ATTR_DIM})", at.dim())));
            }
        }
        if self.kind.uses_qi() {
            let qi = b.qi.as_ref().ok_or_else(|| missing("query impact"))?;
            if qi.dim() != (n, t_prime) {
                return Err(Error::Shape(format!("query impact {:?}, expected ({n}, {t_prime})", qi.dim())));
            }
        }
        Ok(n)
    }

    /// Final encoder state `(h, c)`.
    pub fn encode(&self, b: &Batch) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_batch(b, false)?;
        let mut tape = Tape::new(false);
        self.encode_into(b, &mut tape)
    }

    fn encode_into(&self, b: &Batch, tape: &mut Tape) -> Result<(Array2<f64>, Array2<f64>)> {
        let ps = &self.params;
        let n = b.speeds.nrows();
        let (mut h, mut c) = self.layers.encoder.zero_state(n);
        for step in 0..self.shape.t {
            let x = b.speeds.slice(s![.., step..step + 1]).to_owned();
            let mut xs = vec![x];
            if let (Some(g), Some(nb)) = (&self.layers.graph, &b.neighbors) {
                let nb_s = nb.index_axis(Axis(1), step).to_owned();
                let pre = g.forward(ps, nb_s.view())?;
                xs.push(relu(&pre));
                tape.graph.push((nb_s, pre));
            }
            let (nh, nc, cache) = self.layers.encoder.step(ps, &xs, &h, &c)?;
            tape.enc.push(cache);
            h = nh;
            c = nc;
        }
        Ok((h, c))
    }

    fn encode_qi(&self, b: &Batch, tape: &mut Tape) -> Result<Option<Array2<f64>>> {
        let (Some(layer), Some(qi)) = (&self.layers.qi_encoder, &b.qi) else {
            return Ok(None);
        };
        let (mut h, mut c) = layer.zero_state(qi.nrows());
        for k in 0..self.shape.t_prime {
            let x = qi.slice(s![.., k..k + 1]).to_owned();
            let (nh, nc, cache) = layer.step(&self.params, &[x], &h, &c)?;
            tape.qi.push(cache);
            h = nh;
            c = nc;
        }
        Ok(Some(h))
    }

    /// Normalized predictions `[B, t']`. With teacher forcing each decoder
    /// step after the first sees the true previous target; without it, the
    /// model's own previous prediction.
    pub fn forward(&self, b: &Batch, teacher_forcing: bool) -> Result<(Array2<f64>, Tape)> {
        let n = self.check_batch(b, teacher_forcing)?;
        let ps = &self.params;
        let t = self.shape.t;
        let mut tape = Tape::new(teacher_forcing);
        let (mut h, mut c) = self.encode_into(b, &mut tape)?;
        let hq = self.encode_qi(b, &mut tape)?;
        let mut prev = b.speeds.slice(s![.., t - 1..t]).to_owned();
        let mut preds = Array2::zeros((n, self.shape.t_prime));
        for k in 0..self.shape.t_prime {
            let mut xs = vec![prev];
            if let (true, Some(at)) = (self.kind.uses_attributes(), &b.attributes) {
                xs.push(at.index_axis(Axis(1), k).to_owned());
            }
            if let Some(hq) = &hq {
                xs.push(hq.clone());
            }
            let (nh, nc, cache) = self.layers.decoder.step(ps, &xs, &h, &c)?;
            let y = self.layers.head.forward(ps, nh.view())?;
            preds.column_mut(k).assign(&y.column(0));
            tape.dec.push(cache);
            tape.dec_h.push(nh.clone());
            h = nh;
            c = nc;
            prev = match (&b.targets, teacher_forcing) {
                (Some(tg), true) => tg.slice(s![.., k..k + 1]).to_owned(),
                _ => y,
            };
        }
        Ok((preds, tape))
    }

    /// Inference-mode predictions; never reads targets.
    pub fn predict(&self, b: &Batch) -> Result<Array2<f64>> {
        let inference = Batch {
            targets: None,
            ..b.clone()
        };
        Ok(self.forward(&inference, false)?.0)
    }

    /// Gradients of a loss whose derivative with respect to the predictions
    /// is `dpred`.
    pub fn backward(&self, tape: &Tape, dpred: &Array2<f64>) -> Gradients {
        let ps = &self.params;
        let mut grads = ps.zero_gradients();
        let n = dpred.nrows();
        let hd = self.shape.hidden;
        let (mut dh, mut dc) = (Array2::zeros((n, hd)), Array2::zeros((n, hd)));
        let mut dhq = Array2::zeros((n, self.shape.qi_hidden));
        let mut dprev_next: Option<Array2<f64>> = None;
        let qi_block = 1 + self.kind.uses_attributes() as usize;
        for k in (0..self.shape.t_prime).rev() {
            let mut dy = dpred.slice(s![.., k..k + 1]).to_owned();
            if let Some(d) = dprev_next.take() {
                dy += &d;
            }
            dh += &self.layers.head.backward(ps, &mut grads, tape.dec_h[k].view(), &dy);
            let (dxs, ndh, ndc) = self.layers.decoder.step_backward(ps, &mut grads, &tape.dec[k], &dh, &dc);
            dh = ndh;
            dc = ndc;
            if !tape.teacher_forcing && k > 0 {
                dprev_next = Some(dxs[0].clone());
            }
            if self.kind.uses_qi() {
                dhq += &dxs[qi_block];
            }
        }
        for step in (0..self.shape.t).rev() {
            let (dxs, ndh, ndc) = self.layers.encoder.step_backward(ps, &mut grads, &tape.enc[step], &dh, &dc);
            dh = ndh;
            dc = ndc;
            if let Some(g) = &self.layers.graph {
                let (nb_s, pre) = &tape.graph[step];
                let dpre = relu_backward(pre, &dxs[1]);
                g.backward(ps, &mut grads, nb_s.view(), &dpre);
            }
        }
        if let Some(layer) = &self.layers.qi_encoder {
            let mut dh = dhq;
            let mut dc = Array2::zeros((n, self.shape.qi_hidden));
            for cache in tape.qi.iter().rev() {
                let (_, ndh, ndc) = layer.step_backward(ps, &mut grads, cache, &dh, &dc);
                dh = ndh;
                dc = ndc;
            }
        }
        grads
    }

    /// Mean squared error on normalized speeds and its gradients.
    pub fn loss_and_grad(&self, b: &Batch, teacher_forcing: bool) -> Result<(f64, Gradients)> {
        let targets = b
            .targets
            .as_ref()
            .ok_or_else(|| Error::Missing("targets required for training".into()))?;
        let (pred, tape) = self.forward(b, teacher_forcing)?;
        let (loss, dpred) = mse(&pred, targets)?;
        Ok((loss, self.backward(&tape, &dpred)))
    }

    pub fn loss(&self, b: &Batch, teacher_forcing: bool) -> Result<f64> {
        let targets = b
            .targets
            .as_ref()
            .ok_or_else(|| Error::Missing("targets required for training".into()))?;
        let (pred, _) = self.forward(b, teacher_forcing)?;
        Ok(mse(&pred, targets)?.0)
    }
}

impl Tape {
    fn new(teacher_forcing: bool) -> Tape {
        Tape {
            teacher_forcing,
            enc: Vec::new(),
            graph: Vec::new(),
            qi: Vec::new(),
            dec: Vec::new(),
            dec_h: Vec::new(),
        }
    }
}

/// Random batch with every auxiliary input, for tests and gradient checks.
pub fn random_batch(n: usize, shape: &ModelShape, seed: u64) -> Batch {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);
    Batch {
        speeds: Array2::from_shape_simple_fn((n, shape.t), || r(-2.0, 2.0)),
        targets: Some(Array2::from_shape_simple_fn((n, shape.t_prime), || r(-2.0, 2.0))),
        neighbors: Some(Array3::from_shape_simple_fn((n, shape.t, NEIGHBOR_SLOTS), || r(-2.0, 2.0))),
        attributes: Some(Array3::from_shape_simple_fn((n, shape.t_prime, ATTR_DIM), || r(0.0, 1.0))),
        qi: Some(Array2::from_shape_simple_fn((n, shape.t_prime), || r(0.0, 3.0))),
    }
}

/// Central-difference check of the analytic gradient of `kind` on a random
/// batch of `n` windows.
pub fn check_gradients(
    kind: ModelKind,
    shape: ModelShape,
    n: usize,
    teacher_forcing: bool,
    cfg: &crate::nn::GradCheckConfig,
) -> Result<crate::nn::GradCheckReport> {
    let mut model = Model::new(kind, shape, cfg.seed)?;
    let batch = random_batch(n, &shape, cfg.seed.wrapping_add(1));
    let (_, grads) = model.loss_and_grad(&batch, teacher_forcing)?;
    let probe = model.clone();
    let loss = |ps: &ParamSet| {
        let mut m = probe.clone();
        m.params = ps.clone();
        m.loss(&batch, teacher_forcing)
    };
    crate::nn::gradcheck(&mut model.params, &grads, loss, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck, GradCheckConfig};

    fn tiny() -> ModelShape {
        ModelShape {
            hidden: 8,
            graph_dim: 4,
            qi_hidden: 5,
            t: 8,
            t_prime: 2,
        }
    }

    #[test]
    fn kinds_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
        }
        assert!("lstm".parse::<ModelKind>().is_err());
        assert!(ModelKind::Hybrid.uses_attributes() && ModelKind::Hybrid.uses_neighbors() && ModelKind::Hybrid.uses_qi());
    }

    #[test]
    fn gradcheck_every_variant_both_modes() {
        for kind in ModelKind::ALL {
            for tf in [true, false] {
                let mut m = Model::new(kind, tiny(), 21).unwrap();
                let b = random_batch(3, &m.shape, 5);
                let (_, g) = m.loss_and_grad(&b, tf).unwrap();
                let model = m.clone();
                let loss = |ps: &ParamSet| {
                    let mut mm = model.clone();
                    mm.params = ps.clone();
                    mm.loss(&b, tf)
                };
                let cfg = GradCheckConfig {
                    n_coords: 50,
                    seed: 9,
                    ..Default::default()
                };
                let r = gradcheck(&mut m.params, &g, loss, &cfg).unwrap();
                assert!(r.passed(), "{kind} tf={tf}: {:?}", r.worst());
            }
        }
    }

    #[test]
    fn hybrid_tensors_are_union_of_groups() {
        let names = |k| {
            Model::new(k, tiny(), 1)
                .unwrap()
                .params
                .names()
                .into_iter()
                .map(String::from)
                .collect::<std::collections::BTreeSet<_>>()
        };
        let core = names(ModelKind::Seq2seq);
        assert!(core.iter().all(|n| aux_group(n).is_none()));
        let mut union = core.clone();
        for k in [ModelKind::Seq2seqAt, ModelKind::Seq2seqNb, ModelKind::Seq2seqQi] {
            let n = names(k);
            assert!(n.is_superset(&core));
            union.extend(n);
        }
        assert_eq!(names(ModelKind::Hybrid), union);
    }

    #[test]
    fn zeroed_auxiliaries_reduce_to_plain_model() {
        let plain = Model::new(ModelKind::Seq2seq, tiny(), 33).unwrap();
        let b = random_batch(4, &tiny(), 2);
        let reference = plain.predict(&b).unwrap();
        for kind in [ModelKind::Seq2seqAt, ModelKind::Seq2seqNb, ModelKind::Seq2seqQi, ModelKind::Hybrid] {
            let mut m = Model::new(kind, tiny(), 33).unwrap();
            m.zero_auxiliary();
            let p = m.predict(&b).unwrap();
            assert_eq!(
                p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                reference.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "{kind}"
            );
        }
    }

    #[test]
    fn nb_with_zero_neighbors_and_graph_weight_matches_plain() {
        let plain = Model::new(ModelKind::Seq2seq, tiny(), 4).unwrap();
        let mut nb = Model::new(ModelKind::Seq2seqNb, tiny(), 4).unwrap();
        nb.params.zero_prefix("graph.w");
        let mut b = random_batch(2, &tiny(), 8);
        b.neighbors.as_mut().unwrap().fill(0.0);
        assert_eq!(plain.encode(&b).unwrap(), nb.encode(&b).unwrap());
    }

    #[test]
    fn neighbor_order_matters() {
        let m = Model::new(ModelKind::Seq2seqNb, tiny(), 4).unwrap();
        let b = random_batch(2, &tiny(), 8);
        let mut swapped = b.clone();
        let nb = swapped.neighbors.as_mut().unwrap();
        for r in 0..2 {
            for s in 0..8 {
                nb.swap([r, s, 0], [r, s, 9]);
            }
        }
        assert_ne!(m.predict(&b).unwrap(), m.predict(&swapped).unwrap());
    }

    #[test]
    fn missing_auxiliary_input_errors() {
        let m = Model::new(ModelKind::Hybrid, tiny(), 1).unwrap();
        let mut b = random_batch(2, &tiny(), 1);
        b.qi = None;
        assert!(matches!(m.predict(&b), Err(Error::Missing(_))));
        let at = Model::new(ModelKind::Seq2seqAt, tiny(), 1).unwrap();
        let mut b = random_batch(2, &tiny(), 1);
        b.attributes = None;
        assert!(at.predict(&b).is_err());
    }

    #[test]
    fn inference_ignores_targets() {
        let m = Model::new(ModelKind::Hybrid, tiny(), 6).unwrap();
        let b = random_batch(3, &tiny(), 3);
        let mut other = b.clone();
        other.targets.as_mut().unwrap().fill(100.0);
        assert_eq!(m.predict(&b).unwrap(), m.predict(&other).unwrap());
        assert_eq!(m.predict(&b).unwrap().dim(), (3, 2));
    }

    #[test]
    fn output_length_independent_of_history_length() {
        for t in [3, 12, 30] {
            let shape = ModelShape { t, t_prime: 8, ..tiny() };
            let m = Model::new(ModelKind::Seq2seqQi, shape, 1).unwrap();
            assert_eq!(m.predict(&random_batch(2, &shape, 1)).unwrap().ncols(), 8);
        }
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        // without neighbors reaching the encoder, the graph weights only matter
        // through relu; a huge negative bias kills the rectifier entirely
        let mut m = Model::new(ModelKind::Seq2seqNb, tiny(), 2).unwrap();
        let id = m.params.id("graph.b").unwrap();
        m.params.value_mut(id).fill(-1e6);
        let (_, g) = m.loss_and_grad(&random_batch(3, &tiny(), 4), true).unwrap();
        assert!(g.get(m.params.id("graph.w").unwrap()).iter().all(|v| *v == 0.0));
        assert!(g.get(id).iter().all(|v| *v == 0.0));
    }

    /// Scalar LSTM step with gate order i, f, g, o.
    fn scalar_step(wx: &[f64], wh: [f64; 4], b: [f64; 4], x: &[f64], h: f64, c: f64) -> (f64, f64) {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z: Vec<f64> = (0..4)
            .map(|k| {
                let mut acc = wh[k] * h + b[k];
                for (j, xv) in x.iter().enumerate() {
                    acc += wx[j * 4 + k] * xv;
                }
                acc
            })
            .collect();
        let (i, f, g, o) = (sig(z[0]), sig(z[1]), z[2].tanh(), sig(z[3]));
        let c = f * c + i * g;
        (o * c.tanh(), c)
    }

    #[test]
    fn toy_unroll_matches_scalar_trace() {
        let shape = ModelShape {
            hidden: 1,
            graph_dim: 1,
            qi_hidden: 1,
            t: 4,
            t_prime: 3,
        };
        let mut m = Model::new(ModelKind::Seq2seq, shape, 0).unwrap();
        let set = |m: &mut Model, name: &str, v: &[f64]| {
            let id = m.params.id(name).unwrap();
            let arr = m.params.value_mut(id);
            for (dst, src) in arr.iter_mut().zip(v) {
                *dst = *src;
            }
        };
        let (ewx, ewh, eb) = ([0.6, -0.4, 0.9, 0.3], [0.1, 0.2, -0.5, 0.4], [0.0, 1.0, 0.1, -0.1]);
        let (dwx, dwh, db) = ([-0.2, 0.5, 0.7, 0.2], [0.3, -0.1, 0.6, 0.5], [0.05, 1.0, -0.2, 0.0]);
        set(&mut m, "encoder.wx.speed", &ewx);
        set(&mut m, "encoder.wh", &ewh);
        set(&mut m, "encoder.b", &eb);
        set(&mut m, "decoder.wx.speed", &dwx);
        set(&mut m, "decoder.wh", &dwh);
        set(&mut m, "decoder.b", &db);
        set(&mut m, "head.w", &[1.5]);
        set(&mut m, "head.b", &[-0.1]);
        let history = [0.2, -0.5, 1.1, 0.4];
        let targets = [0.3, -0.2, 0.8];
        let b = Batch {
            speeds: Array2::from_shape_vec((1, 4), history.to_vec()).unwrap(),
            targets: Some(Array2::from_shape_vec((1, 3), targets.to_vec()).unwrap()),
            neighbors: None,
            attributes: None,
            qi: None,
        };
        let (mut h, mut c) = (0.0, 0.0);
        for x in history {
            (h, c) = scalar_step(&ewx, ewh, eb, &[x], h, c);
        }
        let (h_enc, c_enc) = (h, c);
        for tf in [true, false] {
            let (mut h, mut c, mut prev) = (h_enc, c_enc, history[3]);
            let (pred, _) = m.forward(&b, tf).unwrap();
            for k in 0..3 {
                (h, c) = scalar_step(&dwx, dwh, db, &[prev], h, c);
                let y = 1.5 * h - 0.1;
                assert!((pred[[0, k]] - y).abs() < 1e-12, "tf={tf} k={k}");
                prev = if tf { targets[k] } else { y };
            }
        }
    }
}
