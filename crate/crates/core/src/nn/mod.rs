//! A small reverse-mode core for recurrent forecasters: named parameter
//! tensors, batched LSTM and dense layers with hand-written backward passes,
//! Adam, finite-difference checking and a checkpoint format.
//!
//! All tensors are 2-D `f64` arrays. Batches are rows.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, TensorHeader};
pub use gradcheck::{gradcheck, GradCheckConfig, GradCheckReport};
pub use layers::{mse, relu, relu_backward, Dense, LstmCache, LstmLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl ParamTensor {
    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    Uniform { fan_in: usize },
    Zeros,
    Constant(f64),
}

/// Ordered, name-addressed parameter tensors.
///
/// Each tensor's initial values depend only on `(seed, name, shape)`, so two
/// models sharing a tensor name start from identical values for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub seed: u64,
    tensors: Vec<ParamTensor>,
    by_name: BTreeMap<String, ParamId>,
}

/// Per-tensor RNG seeded from the model seed and the tensor name.
pub fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

impl ParamSet {
    pub fn new(seed: u64) -> Self {
        ParamSet {
            seed,
            tensors: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: (usize, usize), init: Init) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let value = match init {
            Init::Zeros => Array2::zeros(shape),
            Init::Constant(c) => Array2::from_elem(shape, c),
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = tensor_rng(self.seed, name);
                Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
            }
        };
        self.push(name, value)
    }

    /// Adds a tensor with explicit values.
    pub fn push(&mut self, name: &str, value: Array2<f64>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            grad: Array2::zeros(value.dim()),
            value,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0].value
    }

    pub fn tensor(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    /// Fresh zero gradients shaped like this set.
    pub fn zero_gradients(&self) -> Gradients {
        Gradients(self.tensors.iter().map(|t| Array2::zeros(t.value.dim())).collect())
    }

    /// Adds `g` into the stored gradients.
    pub fn accumulate(&mut self, g: &Gradients) -> Result<()> {
        if g.0.len() != self.tensors.len() {
            return Err(Error::Shape("gradient count does not match parameter count".into()));
        }
        for (t, g) in self.tensors.iter_mut().zip(&g.0) {
            if t.grad.dim() != g.dim() {
                return Err(Error::Shape(format!("gradient shape mismatch for {}", t.name)));
            }
            t.grad += g;
        }
        Ok(())
    }

    /// Stored gradients as a [`Gradients`] value.
    pub fn gradients(&self) -> Gradients {
        Gradients(self.tensors.iter().map(|t| t.grad.clone()).collect())
    }

    /// Fails naming the first tensor holding a non-finite gradient.
    pub fn check_finite_grads(&self) -> Result<()> {
        for t in &self.tensors {
            if let Some(index) = t.grad.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: t.name.clone(),
                    index,
                });
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.iter().all(|v| v.is_finite()))
    }

    /// Scalar at flat coordinate `index` of tensor `id` (row-major).
    pub fn coord(&self, id: ParamId, index: usize) -> f64 {
        let t = &self.tensors[id.0].value;
        let cols = t.ncols();
        t[[index / cols, index % cols]]
    }

    pub fn set_coord(&mut self, id: ParamId, index: usize, v: f64) {
        let t = &mut self.tensors[id.0].value;
        let cols = t.ncols();
        t[[index / cols, index % cols]] = v;
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for t in &mut self.tensors {
            if t.name.starts_with(prefix) {
                t.value.fill(0.0);
                n += 1;
            }
        }
        n
    }
}

/// Gradient buffers parallel to a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Array2<f64>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.0[id.0]
    }

    /// Entrywise `self += other`.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.0 {
            a.mapv_inplace(|v| v * k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamSet::new(7);
        a.add("x", (3, 4), Init::Uniform { fan_in: 4 }).unwrap();
        a.add("core", (5, 2), Init::Uniform { fan_in: 5 }).unwrap();
        let mut b = ParamSet::new(7);
        b.add("core", (5, 2), Init::Uniform { fan_in: 5 }).unwrap();
        assert_eq!(a.value(a.id("core").unwrap()), b.value(b.id("core").unwrap()));
        let mut c = ParamSet::new(8);
        c.add("core", (5, 2), Init::Uniform { fan_in: 5 }).unwrap();
        assert_ne!(b.value(ParamId(0)), c.value(ParamId(0)));
    }

    #[test]
    fn uniform_bound() {
        let mut p = ParamSet::new(1);
        let id = p.add("w", (40, 50), Init::Uniform { fan_in: 16 }).unwrap();
        assert!(p.value(id).iter().all(|v| v.abs() < 0.25));
        assert!(p.value(id).iter().any(|v| v.abs() > 0.2));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new(1);
        p.add("w", (1, 1), Init::Zeros).unwrap();
        assert!(p.add("w", (1, 1), Init::Zeros).is_err());
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut p = ParamSet::new(1);
        p.add("a", (2, 2), Init::Zeros).unwrap();
        p.add("b", (2, 2), Init::Zeros).unwrap();
        let mut g = p.zero_gradients();
        g.0[1][[1, 0]] = f64::NAN;
        p.accumulate(&g).unwrap();
        match p.check_finite_grads() {
            Err(Error::NonFiniteGradient { name, index }) => {
                assert_eq!(name, "b");
                assert_eq!(index, 2);
            }
            other => panic!("{other:?}"),
        }
    }
}
