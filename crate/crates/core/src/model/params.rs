use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{DiffTensor, Tape};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Convolution kernels; the only kind that receives weight decay.
    Weight,
    Bias,
    Norm,
    Embedding,
    /// Non-trainable state such as running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named parameters and buffers in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Overwrites a value by name, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(shape_err(
                "ParamStore::set",
                format!("{name}: stored {:?}, given {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Copies every parameter of `self` from the same-named entry of `other`.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .ok_or_else(|| invalid(format!("source has no parameter {}", p.name)))?;
            let v = other.value(src);
            if v.shape() != p.value.shape() {
                return Err(shape_err(
                    "copy_matching_from",
                    format!("{}: {:?} vs {:?}", p.name, p.value.shape(), v.shape()),
                ));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.numel())
            .sum()
    }
}

/// Binds stored parameters to tape leaves for one forward pass.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s mut ParamStore,
    leaves: Vec<Option<DiffTensor<'t>>>,
    train: bool,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s mut ParamStore, train: bool) -> Self {
        let leaves = vec![None; store.len()];
        Binder {
            tape,
            store,
            leaves,
            train,
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn train(&self) -> bool {
        self.train
    }

    /// Leaf for a trainable parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> DiffTensor<'t> {
        if let Some(t) = self.leaves[id.0] {
            return t;
        }
        let p = &self.store.params[id.0];
        debug_assert!(p.kind.trainable(), "{} is a buffer", p.name);
        let leaf = self.tape.param(p.value.clone());
        self.leaves[id.0] = Some(leaf);
        leaf
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor {
        &self.store.params[id.0].value
    }

    pub fn set_buffer(&mut self, id: ParamId, value: Tensor) {
        self.store.params[id.0].value = value;
    }

    pub fn finish(self) -> Bindings<'t> {
        Bindings { leaves: self.leaves }
    }
}

/// Parameter leaves used by a finished forward pass.
pub struct Bindings<'t> {
    leaves: Vec<Option<DiffTensor<'t>>>,
}

impl<'t> Bindings<'t> {
    pub fn leaf(&self, id: ParamId) -> Option<DiffTensor<'t>> {
        self.leaves[id.0]
    }

    /// Gradient per parameter id (after backward); `None` for unused
    /// parameters and buffers.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.leaves.iter().map(|l| l.and_then(|t| t.grad())).collect()
    }
}
