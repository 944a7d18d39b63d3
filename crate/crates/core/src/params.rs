//! Named parameter storage and the per-pass forward context.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Trainable tensors plus non-trainable buffers (running statistics), both
/// keyed by dotted path names and iterated in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Folds batch statistics into the running averages
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn apply_batch_stats(&mut self, updates: &[(String, BatchStats)], momentum: f64) -> Result<()> {
        for (name, stats) in updates {
            for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let buf = self.buffer_mut(&format!("{name}.{suffix}"))?;
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State of one forward pass: the tape, the parameters registered on it, and
/// side outputs (batch statistics, named activations).
pub struct Forward<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    mode: Mode,
    vars: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
    stats: Vec<(String, BatchStats)>,
    taps: Vec<(String, Var)>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            vars: BTreeMap::new(),
            frozen: BTreeSet::new(),
            stats: Vec::new(),
            taps: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Registers `name` as a constant: it takes part in the forward pass but
    /// receives no gradient.
    pub fn freeze(&mut self, name: impl Into<String>) {
        self.frozen.insert(name.into());
    }

    /// Tape handle for parameter `name`, registering it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = if self.frozen.contains(name) {
            self.graph.constant(value)
        } else {
            self.graph.param(value)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.graph.constant(value)
    }

    pub(crate) fn record_stats(&mut self, name: &str, stats: BatchStats) {
        self.stats.push((name.to_string(), stats));
    }

    pub fn batch_stats(&self) -> &[(String, BatchStats)] {
        &self.stats
    }

    /// Records a named intermediate activation.
    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        self.taps.push((name.into(), v));
    }

    pub fn taps(&self) -> &[(String, Var)] {
        &self.taps
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Gradient for every stored parameter; parameters that did not take part
    /// in the pass get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.store
            .iter()
            .map(|(name, value)| {
                let g = self
                    .vars
                    .get(name)
                    .and_then(|&v| grads.get(v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}
