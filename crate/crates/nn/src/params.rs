//! Named parameter storage for one network.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::next_set_id;
use crate::{NnError, Result, Tensor};

/// The learnable tensors of one network, in registration order.
///
/// Every set carries a process-unique id so gradients from a shared tape can
/// be routed back to the right network. Cloning allocates a fresh id.
#[derive(Debug)]
pub struct ParamSet {
    id: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    reads: Cell<u64>,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        ParamSet {
            id: next_set_id(),
            names: self.names.clone(),
            values: self.values.clone(),
            reads: Cell::new(0),
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { id: next_set_id(), names: Vec::new(), values: Vec::new(), reads: Cell::new(0) }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn value(&self, index: usize) -> &Tensor {
        &self.values[index]
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.values[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// How many times a tape has bound one of these parameters.
    pub fn reads(&self) -> u64 {
        self.reads.get()
    }

    pub(crate) fn note_read(&self) {
        self.reads.set(self.reads.get() + 1);
    }

    /// Overwrites the values from `(name, tensor)` pairs; names and shapes
    /// must match this set exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(NnError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                entries.len()
            )));
        }
        for (i, (name, tensor)) in entries.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(NnError::Checkpoint(format!(
                    "tensor {i} is `{name}`, expected `{}`",
                    self.names[i]
                )));
            }
            if tensor.shape() != self.values[i].shape() {
                return Err(NnError::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = tensor;
        }
        Ok(())
    }
}

/// Weight initialization used while building a network.
pub struct Init {
    rng: ChaCha8Rng,
    std: f64,
}

impl Init {
    /// Normal(0, `std`) weights drawn from a seeded stream.
    pub fn normal(seed: u64, std: f64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed), std }
    }

    pub fn sample(&mut self, shape: &[usize]) -> Tensor {
        let dist = Normal::new(0.0, self.std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::from_vec(shape, data).expect("shape matches")
    }
}
