//! Mini-batch Adam training with deterministic shuffling.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{predict_kmh, ForecastData};
use super::{Batch, Model};
use crate::error::{Error, Result};
use crate::eval::ApeSum;
use crate::nn::{Adam, AdamConfig, Gradients};
use crate::speed::WindowKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub teacher_forcing: bool,
    /// Batch shards evaluated on separate threads; gradients are reduced in
    /// shard order, so results depend on this value but not on scheduling.
    pub shards: usize,
    /// Keep the parameters of the epoch with the lowest validation MAPE.
    pub select_best: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 128,
            lr: 1e-3,
            epochs: 20,
            seed: 0,
            teacher_forcing: true,
            shards: 1,
            select_best: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.shards == 0 {
            return Err(Error::Config("batch_size, epochs and shards must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters the model holds on return.
    pub kept_epoch: usize,
    pub steps: u64,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Loss and gradients of one batch, split into `shards` contiguous row
/// ranges. Each shard's contribution is weighted by its share of rows.
pub fn batch_loss_and_grad(model: &Model, batch: &Batch, teacher_forcing: bool, shards: usize) -> Result<(f64, Gradients)> {
    let n = batch.speeds.nrows();
    if shards <= 1 || n < 2 {
        return model.loss_and_grad(batch, teacher_forcing);
    }
    let chunk = n.div_ceil(shards);
    let ranges: Vec<(usize, usize)> = (0..n).step_by(chunk).map(|lo| (lo, (lo + chunk).min(n))).collect();
    let parts: Vec<Result<(f64, Gradients, usize)>> = std::thread::scope(|s| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|&(lo, hi)| {
                s.spawn(move || {
                    let sub = slice_batch(batch, lo, hi);
                    model.loss_and_grad(&sub, teacher_forcing).map(|(l, g)| (l, g, hi - lo))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training shard panicked")).collect()
    });
    let mut total = model.params.zero_gradients();
    let mut loss = 0.0;
    for p in parts {
        let (l, mut g, rows) = p?;
        let w = rows as f64 / n as f64;
        g.scale(w);
        total.add_assign(&g);
        loss += l * w;
    }
    Ok((loss, total))
}

fn slice_batch(b: &Batch, lo: usize, hi: usize) -> Batch {
    use ndarray::s;
    Batch {
        speeds: b.speeds.slice(s![lo..hi, ..]).to_owned(),
        targets: b.targets.as_ref().map(|t| t.slice(s![lo..hi, ..]).to_owned()),
        neighbors: b.neighbors.as_ref().map(|t| t.slice(s![lo..hi, .., ..]).to_owned()),
        attributes: b.attributes.as_ref().map(|t| t.slice(s![lo..hi, .., ..]).to_owned()),
        qi: b.qi.as_ref().map(|t| t.slice(s![lo..hi, ..]).to_owned()),
    }
}

/// Validation MAPE in km/h space over all horizons.
pub fn validation_mape(model: &Model, data: &ForecastData, keys: &[WindowKey], batch_size: usize) -> Result<Option<f64>> {
    if keys.is_empty() {
        return Ok(None);
    }
    let pred = predict_kmh(model, data, keys, batch_size)?;
    let mut acc = ApeSum::default();
    for (r, k) in keys.iter().enumerate() {
        for (j, a) in data.targets_kmh(*k)?.into_iter().enumerate() {
            acc.push(a, pred[[r, j]])?;
        }
    }
    Ok(acc.mean())
}

/// Trains `model` in place. Writes one JSON line per epoch to `log`.
///
/// A non-finite loss or gradient restores the parameters from before the
/// failing step and returns [`Error::Diverged`].
pub fn train(
    model: &mut Model,
    data: &ForecastData,
    train_keys: &[WindowKey],
    val_keys: &[WindowKey],
    cfg: &TrainingConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_keys.is_empty() {
        return Err(Error::Missing("no training windows".into()));
    }
    let mut opt = Adam::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..train_keys.len()).collect();
    let mut outcome = TrainOutcome {
        log: Vec::new(),
        kept_epoch: 0,
        steps: 0,
    };
    let mut best: Option<(f64, crate::nn::ParamSet, usize)> = None;
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let keys: Vec<WindowKey> = chunk.iter().map(|&i| train_keys[i]).collect();
            let batch = data.batch(&keys, model.kind, true)?;
            let (loss, grads) = batch_loss_and_grad(model, &batch, cfg.teacher_forcing, cfg.shards)?;
            let bad_grad = grads.0.iter().any(|g| g.iter().any(|v| !v.is_finite()));
            if !loss.is_finite() || bad_grad {
                return Err(Error::Diverged { epoch, loss });
            }
            let last_good = model.params.clone();
            model.params.zero_grad();
            model.params.accumulate(&grads)?;
            opt.step(&mut model.params)?;
            if !model.params.all_finite() {
                model.params = last_good;
                return Err(Error::Diverged { epoch, loss });
            }
            outcome.steps += 1;
            loss_sum += loss * keys.len() as f64;
            rows += keys.len();
        }
        let val_mape = validation_mape(model, data, val_keys, cfg.batch_size.max(256))?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / rows as f64,
            val_mape,
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        outcome.log.push(entry);
        outcome.kept_epoch = epoch;
        if cfg.select_best {
            if let Some(v) = val_mape {
                if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                    best = Some((v, model.params.clone(), epoch));
                }
            }
        }
    }
    if let Some((_, params, epoch)) = best {
        model.params = params;
        outcome.kept_epoch = epoch;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::data::tests::chain_data;
    use crate::models::{random_batch, ModelKind, ModelShape};
    use crate::network::attributes::Calendar;
    use crate::speed::SpeedSeries;

    fn shape() -> ModelShape {
        ModelShape {
            hidden: 8,
            graph_dim: 3,
            qi_hidden: 4,
            t: 12,
            t_prime: 4,
        }
    }

    fn data() -> ForecastData {
        let (net, series) = chain_data(3, 300);
        ForecastData::build(&net, &series, None, &Calendar::plain(), 200, shape()).unwrap()
    }

    #[test]
    fn one_step_reduces_loss_for_most_seeds() {
        let mut improved = 0;
        for seed in 0..10 {
            let mut m = Model::new(ModelKind::Seq2seq, shape(), seed).unwrap();
            let b = random_batch(32, &shape(), 100 + seed);
            let (before, g) = m.loss_and_grad(&b, true).unwrap();
            m.params.accumulate(&g).unwrap();
            let mut opt = Adam::new(&m.params, AdamConfig::default());
            opt.step(&mut m.params).unwrap();
            improved += (m.loss(&b, true).unwrap() < before) as usize;
        }
        assert!(improved >= 9, "{improved}/10");
    }

    #[test]
    fn training_is_deterministic() {
        let d = data();
        let (keys, _) = d.train_keys(5);
        let cfg = TrainingConfig {
            batch_size: 16,
            epochs: 2,
            seed: 4,
            ..Default::default()
        };
        let run = || {
            let mut m = Model::new(ModelKind::Hybrid, shape(), 4).unwrap();
            let mut log = Vec::new();
            train(&mut m, &d, &keys, &keys[..10], &cfg, Some(&mut log)).unwrap();
            (m.params, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let text = String::from_utf8(la).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"epoch\":1,\"train_loss\":"));
    }

    #[test]
    fn sharded_gradients_match_single_shard() {
        let m = Model::new(ModelKind::Hybrid, shape(), 2).unwrap();
        let b = random_batch(10, &shape(), 3);
        let (l1, g1) = batch_loss_and_grad(&m, &b, true, 1).unwrap();
        let (l3, g3) = batch_loss_and_grad(&m, &b, true, 3).unwrap();
        assert!((l1 - l3).abs() < 1e-12);
        for (a, b) in g1.0.iter().zip(&g3.0) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let (_, g3b) = batch_loss_and_grad(&m, &b, true, 3).unwrap();
        assert_eq!(g3, g3b);
    }

    #[test]
    fn constant_segment_is_fit() {
        let (net, _) = chain_data(1, 10);
        let series = vec![SpeedSeries::new("L0", 1_490_976_000, 900, vec![Some(37.0); 240])];
        let d = ForecastData::build(&net, &series, None, &Calendar::plain(), 160, shape()).unwrap();
        let (train_keys, _) = d.train_keys(1);
        let (test_keys, _) = d.test_keys(1);
        let mut m = Model::new(ModelKind::Seq2seq, shape(), 1).unwrap();
        let cfg = TrainingConfig {
            batch_size: 32,
            epochs: 3,
            ..Default::default()
        };
        train(&mut m, &d, &train_keys, &[], &cfg, None).unwrap();
        let p = predict_kmh(&m, &d, &test_keys, 64).unwrap();
        assert!(p.iter().all(|v| (v - 37.0).abs() / 37.0 < 0.02));
        assert_eq!(p, predict_kmh(&m, &d, &test_keys, 64).unwrap());
        assert_eq!(p.ncols(), 4);
    }

    #[test]
    fn training_reduces_validation_error() {
        let d = data();
        let (keys, _) = d.train_keys(2);
        let (test, _) = d.test_keys(4);
        let mut m = Model::new(ModelKind::Seq2seq, shape(), 3).unwrap();
        let before = validation_mape(&m, &d, &test, 64).unwrap().unwrap();
        let cfg = TrainingConfig {
            batch_size: 16,
            lr: 5e-3,
            epochs: 8,
            ..Default::default()
        };
        let out = train(&mut m, &d, &keys, &test, &cfg, None).unwrap();
        let after = validation_mape(&m, &d, &test, 64).unwrap().unwrap();
        assert!(after < before * 0.7, "{before} -> {after}");
        assert!(out.log.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn divergence_keeps_last_good_parameters() {
        let d = data();
        let (keys, _) = d.train_keys(10);
        let mut m = Model::new(ModelKind::Seq2seq, shape(), 3).unwrap();
        let id = m.params.id("head.b").unwrap();
        m.params.value_mut(id).fill(f64::NAN);
        let before = m.params.clone();
        let err = train(&mut m, &d, &keys, &[], &TrainingConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, .. }));
        // NaN != NaN, so compare bit patterns
        let bits = |p: &crate::nn::ParamSet| p.tensors().iter().flat_map(|t| t.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(bits(&m.params), bits(&before));
    }
}
