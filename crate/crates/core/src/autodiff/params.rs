use std::collections::{BTreeMap, HashMap};

use super::norm::RunningStats;
use super::tape::{Gradients, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        let kept: Vec<_> = self
            .entries
            .drain(..)
            .filter(|(n, _)| !n.starts_with(prefix))
            .collect();
        self.index.clear();
        for (n, t) in kept {
            self.insert(n, t);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copy of the set with every tensor watched on `tape`.
    pub fn bind(&self, tape: &Tape) -> ParamSet {
        let mut bound = ParamSet::new();
        for (n, t) in &self.entries {
            bound.insert(n.clone(), tape.watch(t));
        }
        bound
    }

    /// Gradients in parameter order for a set produced by [`bind`](Self::bind).
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| grads.wrt(t)).collect()
    }
}

/// Non-trainable per-layer state (batch-norm running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Buffers {
    pub stats: BTreeMap<String, RunningStats>,
}

impl Buffers {
    pub fn stats_mut(&mut self, name: &str) -> Result<&mut RunningStats> {
        self.stats
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing running stats '{name}'")))
    }
}

/// Fan-in scaled uniform weights, bound `sqrt(6 / fan_in)`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Adds `{name}.weight` (He-uniform) and `{name}.bias` (zeros) for a conv layer.
pub fn init_conv(
    params: &mut ParamSet,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut SeededRng,
) {
    init_conv_weight(params, name, cout, cin, k, rng);
    params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

/// Bias-free variant for convolutions followed by a norm layer, which would
/// cancel any per-channel shift.
pub fn init_conv_weight(
    params: &mut ParamSet,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut SeededRng,
) {
    params.insert(
        format!("{name}.weight"),
        fan_in_uniform(&[cout, cin, k, k], cin * k * k, rng),
    );
}

/// Adds `{name}.gamma`/`{name}.beta` and fresh running stats.
pub fn init_norm(params: &mut ParamSet, buffers: &mut Buffers, name: &str, channels: usize) {
    params.insert(format!("{name}.gamma"), Tensor::ones(&[channels]));
    params.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
    buffers.stats.insert(name.to_string(), RunningStats::new(channels));
}
