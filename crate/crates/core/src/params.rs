//! Named parameter storage shared by all network modules.

use crate::autodiff::Gradients;
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics and other state updated outside the optimizer.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub kind: ParamKind,
}

impl<T> ParamEntry<T> {
    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Trainable
    }
}

/// Flat, ordered list of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn trainable(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        self.add(name, value, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        self.add(name, value, ParamKind::Buffer)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entry(id).is_trainable())
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.is_trainable())
            .map(|e| e.value.len())
            .sum()
    }

    /// Order-sensitive digest of every stored bit; used to prove a frozen model stayed frozen.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            buf.clear();
            for &x in e.value.iter() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        format!("{:x}", h.finalize())
    }

    /// Apply `f(value, grad)` to every trainable parameter that has a gradient.
    pub fn zip_grads(
        &mut self,
        grads: &Gradients<T>,
        mut f: impl FnMut(ParamId, &mut ArrayD<T>, &ArrayD<T>),
    ) {
        for (i, e) in self.entries.iter_mut().enumerate() {
            if !e.is_trainable() {
                continue;
            }
            if let Some(g) = grads.get(ParamId(i)) {
                f(ParamId(i), &mut e.value, g);
            }
        }
    }
}

/// Kaiming-uniform style initializer (`U(-b, b)`, `b = sqrt(6 / fan_in)` scaled by `gain`).
pub fn kaiming_uniform<T: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> ArrayD<T> {
    let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt() / 2f64.sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::c(dist.sample(rng)))
}

pub fn normal<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::c(dist.sample(rng)))
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::ones(IxDyn(shape))
}
