use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named trainable parameters plus non-trainable buffers (batch-norm running
/// statistics). Keys are dotted paths such as `spatial.conv0.kernel`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(AutodiffError::Dimension {
                op: "set_buffer",
                detail: format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A tape bound to a parameter store for one forward/backward pass.
///
/// Parameters become tape leaves on first use. Batch-norm layers running in
/// training mode record updated running statistics here; the caller applies
/// them to the store after the pass.
pub struct Graph<'p> {
    tape: Tape,
    store: &'p ParamStore,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    trainable: Option<Vec<String>>,
    buffer_updates: BTreeMap<String, Tensor>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            mode,
            trainable: None,
            buffer_updates: BTreeMap::new(),
        }
    }

    /// Restricts gradient tracking to parameters under the given prefixes.
    pub fn with_trainable(mut self, prefixes: Vec<String>) -> Self {
        self.trainable = Some(prefixes);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn is_trainable(&self, name: &str) -> bool {
        self.trainable
            .as_ref()
            .map_or(true, |ps| ps.iter().any(|p| name.starts_with(p.as_str())))
    }

    /// Leaf for parameter `name`, bound once per graph. Gradients are
    /// tracked only in training mode.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.param(name)?.clone();
        let grad = self.mode == Mode::Train && self.is_trainable(name);
        let v = self.tape.leaf(value, grad);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'p Tensor> {
        self.store.buffer(name)
    }

    pub fn record_buffer(&mut self, name: &str, value: Tensor) {
        self.buffer_updates.insert(name.to_string(), value);
    }

    pub fn take_buffer_updates(&mut self) -> BTreeMap<String, Tensor> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Gradients of every bound trainable parameter. Parameters that were
    /// bound but received no gradient report zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(name, _)| self.mode == Mode::Train && self.is_trainable(name))
            .map(|(name, &v)| {
                let g = self
                    .tape
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
