//! Named parameter storage shared by all trainable models.
//!
//! Models register each weight once and keep the returned [`ParamId`];
//! forward passes bind parameters onto a tape through a [`Binder`], the
//! backward pass writes gradients back here, and the optimizer walks the
//! flat entry list. Entry order is the registration order, which makes
//! serialization and optimizer state layout deterministic.

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            value: value.with_requires_grad(true),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            entry.value.clear_grad();
        }
    }

    /// Total scalar count across all entries.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Snapshot of all parameter values (used for best-epoch restore).
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|e| e.value.data().to_vec())
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (entry, saved) in self.entries.iter_mut().zip(snapshot) {
            entry.value.data_mut().copy_from_slice(saved);
        }
    }
}

/// Glorot-style uniform init in `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(shape, data).expect("xavier shape/data agree")
}

/// Binds parameters onto a tape, caching so each id becomes one leaf node.
///
/// An optional `(id, var)` override substitutes a caller-provided tape
/// variable for that parameter; the gradient checker uses this to probe one
/// parameter group at a time.
pub struct Binder<'p> {
    params: &'p ParamSet,
    override_param: Option<(ParamId, Var)>,
    bound: Vec<Option<Var>>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ParamSet, override_param: Option<(ParamId, Var)>) -> Self {
        Binder {
            params,
            override_param,
            bound: vec![None; params.len()],
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some((oid, var)) = self.override_param {
            if oid == id {
                return var;
            }
        }
        if let Some(var) = self.bound[id.0] {
            return var;
        }
        let var = tape.param(self.params, id);
        self.bound[id.0] = Some(var);
        var
    }
}
