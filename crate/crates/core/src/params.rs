//! Named learnable tensors.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    /// The parameter's node on `tape`, registered on first use.
    pub fn var(self, tape: &mut Tape, store: &ParamStore) -> Var {
        tape.param(self.0, &store.entries[self.0].1)
    }
}

/// Ordered collection of learnable tensors. Insertion order is stable and
/// defines checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        t.set_requires_grad(true);
        self.entries.push((name, t));
        ParamId(self.entries.len() - 1)
    }

    /// Uniform in `±sqrt(1/fan_in)`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("finite init"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total learnable scalar count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// Adds the tape's parameter gradients into the stored grad buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (id, var) in tape.param_vars() {
            if let (Some(g), Some(dst)) = (tape.grad(var), self.entries[id].1.grad_mut()) {
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|(_, t)| t.grad())
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for (_, t) in &mut self.entries {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
