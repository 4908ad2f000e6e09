//! Named parameter storage, per-step tape sessions and JSON checkpoints.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    layer: String,
    name: String,
    tensor: Tensor,
}

/// Every trainable tensor of a model, addressed by `(layer, name)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, layer: &str, name: &str, tensor: Tensor) -> ParamId {
        self.entries.push(Entry {
            layer: layer.to_owned(),
            name: name.to_owned(),
            tensor: tensor.with_requires_grad(true),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    /// `layer/name` label of a parameter.
    pub fn label(&self, id: ParamId) -> String {
        let e = &self.entries[id.0];
        format!("{}/{}", e.layer, e.name)
    }

    pub fn find(&self, layer: &str, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.layer == layer && e.name == name)
            .map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Copies gradients out of a swept session into each tensor's `grad`.
    pub fn absorb_grads(&mut self, session: &Session) -> Result<()> {
        for (entry, &var) in self.entries.iter_mut().zip(&session.vars) {
            session.tape.write_grad(var, &mut entry.tensor)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.clear_grad());
    }
}

/// Glorot/Xavier uniform initialization: `U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-a..=a)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from layer constructor")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optionally backward) pass: a fresh tape with every
/// parameter of a store bound as a leaf.
pub struct Session {
    pub tape: Tape,
    vars: Vec<Var>,
    mode: Mode,
    norm_updates: Vec<(usize, BatchStats)>,
}

impl Session {
    /// Binds all parameters. With `track_grads` false the parameters are
    /// recorded as constants and nothing is differentiated.
    pub fn new(store: &ParamStore, mode: Mode, track_grads: bool) -> Self {
        let mut tape = Tape::new();
        let vars = store
            .entries
            .iter()
            .map(|e| {
                if track_grads {
                    tape.param(&e.tensor)
                } else {
                    tape.constant(&e.tensor)
                }
            })
            .collect();
        Self {
            tape,
            vars,
            mode,
            norm_updates: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub(crate) fn record_norm_stats(&mut self, slot: usize, stats: BatchStats) {
        self.norm_updates.push((slot, stats));
    }

    /// Batch statistics observed by each batch-norm slot during this pass.
    pub fn take_norm_updates(&mut self) -> Vec<(usize, BatchStats)> {
        std::mem::take(&mut self.norm_updates)
    }
}

/// `{layer -> {tensor -> {shape, data}}}`
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint(pub BTreeMap<String, BTreeMap<String, StoredTensor>>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn insert(&mut self, layer: &str, name: &str, t: &Tensor) {
        self.0.entry(layer.to_owned()).or_default().insert(
            name.to_owned(),
            StoredTensor {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        );
    }

    pub fn tensor(&self, layer: &str, name: &str) -> Result<Tensor> {
        let stored = self
            .0
            .get(layer)
            .and_then(|l| l.get(name))
            .ok_or_else(|| Error::InvalidConfig(format!("checkpoint has no tensor {layer}/{name}")))?;
        Tensor::new(stored.shape.clone(), stored.data.clone())
    }

    pub fn from_store(store: &ParamStore) -> Self {
        let mut ck = Self::default();
        for e in &store.entries {
            ck.insert(&e.layer, &e.name, &e.tensor);
        }
        ck
    }

    /// Overwrites every store tensor from the checkpoint; shapes must match.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        for e in &mut store.entries {
            let t = self.tensor(&e.layer, &e.name)?;
            if t.shape() != e.tensor.shape() {
                return Err(Error::shape("checkpoint", e.tensor.shape(), t.shape()));
            }
            e.tensor = t.with_requires_grad(true);
        }
        Ok(())
    }
}
