use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// 64-bit FNV-1a, used to derive per-tensor seeds from names.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Named network weights in creation order.
///
/// Initialization is keyed on `(seed, name)`, so two networks built with the
/// same seed hold identical values for every weight they share by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    /// Adds a Kaiming-uniform (fan-in, ReLU gain) weight and returns its index.
    pub(crate) fn add_kaiming(&mut self, name: String, shape: Vec<usize>, fan_in: usize, seed: u64) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.push(name, Tensor::new(shape, data).expect("shape built from positive dims"))
    }

    pub(crate) fn add_zeros(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.push(name, Tensor::zeros(&shape))
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        if let Some(i) = self.position(&name) {
            return i;
        }
        self.entries.push((name, t.with_grad()));
        self.entries.len() - 1
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Scalar count of the weights whose name starts with `prefix`.
    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Places every weight on the tape; `train` controls gradient tracking.
    pub fn register(&self, tape: &mut Tape, train: bool) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.leaf_with(t, train)).collect()
    }

    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        if vars.len() != self.entries.len() {
            return Err(Error::contract("gradient vars do not match the parameter store"));
        }
        for ((_, t), &v) in self.entries.iter_mut().zip(vars) {
            grads.accumulate_into(v, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().for_each(Tensor::zero_grad);
    }

    /// Copies values of same-named, same-shaped weights from `other`.
    /// Returns the number of tensors copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, t) in &mut self.entries {
            if let Some(src) = other.get(name) {
                if src.shape() == t.shape() {
                    t.data_mut().copy_from_slice(src.data());
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Flat copy of all values, in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }
}
