//! Parameter storage and the small set of layers shared by every model.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Ordered map of named parameters. Insertion order is the serialization
/// order, so checkpoints and checksums are stable.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value.with_grad(false));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(name, t)| (name.clone(), tape.param(name, t.clone(), trainable)))
                .collect(),
        }
    }

    /// Registers only the parameters whose names start with `prefix`.
    pub fn bind_prefix(&self, tape: &mut Tape<T>, prefix: &str, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .filter(|(name, _)| name.starts_with(prefix))
                .map(|(name, t)| (name.clone(), tape.param(name, t.clone(), trainable)))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian f64 values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies every entry of `other` in, prefixing names.
    pub fn absorb(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (name, t) in other.iter() {
            self.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn extract(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest.to_string(), t.clone());
            }
        }
        out
    }

    /// Entries whose names start with `prefix`, names unchanged.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(name.clone(), t.clone());
        }
        out
    }

    /// Replaces values from `other`; every name must already exist with the
    /// same shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in other.iter() {
            let slot = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Missing(format!("parameter {name} not in model")))?;
            if slot.shape() != t.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!("{name}: model {:?} vs stored {:?}", slot.shape(), t.shape()),
                ));
            }
            *slot = t.clone();
        }
        if other.len() != self.len() {
            let missing: Vec<_> = self.params.keys().filter(|k| other.get(k).is_none()).collect();
            return Err(Error::Missing(format!("checkpoint lacks {missing:?}")));
        }
        Ok(())
    }
}

/// Parameter handles for one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Missing(format!("parameter {name} not bound")))
    }

    pub fn merge(mut self, other: Bound) -> Bound {
        self.vars.extend(other.vars);
        self
    }
}

/// Deterministic initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::of(dist.sample(&mut self.rng)))
    }
}

/// Affine layer `x W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: format!("{prefix}.w"),
            bias: format!("{prefix}.b"),
            fan_in,
            fan_out,
        }
    }

    /// Normal weights with std `gain / sqrt(fan_in)`, zero bias.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init, gain: f64) {
        let std = gain / (self.fan_in as f64).sqrt();
        store.insert(&self.weight, init.normal(&[self.fan_in, self.fan_out], std));
        store.insert(&self.bias, Tensor::zeros(&[self.fan_out]));
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    /// `x` is `[rows, fan_in]`.
    pub fn forward<T: Scalar>(&self, g: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.get(&self.weight)?)?;
        g.add(h, p.get(&self.bias)?)
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-9;

    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            dim,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(&self.gamma, Tensor::full(&[self.dim], T::one()));
        store.insert(&self.beta, Tensor::zeros(&[self.dim]));
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }

    pub fn forward<T: Scalar>(&self, g: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, self.eps)?;
        let s = g.mul(n, p.get(&self.gamma)?)?;
        g.add(s, p.get(&self.beta)?)
    }
}
