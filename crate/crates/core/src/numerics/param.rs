use std::collections::BTreeMap;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub usize);

/// A named learnable tensor. `grad` stays `None` until the first
/// [`ParamStore::set_grads`] and is never allocated without `requires_grad`.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

/// All learnable tensors of a model, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            grad: None,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        let p = &mut self.params[id.0];
        p.requires_grad = flag;
        if !flag {
            p.grad = None;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    /// Total learnable scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Learnable scalar count grouped by the first `depth` dot-separated
    /// components of each parameter name.
    pub fn count_by_prefix(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            let key = p.name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(key).or_insert(0) += p.value.numel();
        }
        out
    }

    /// Writes `grads` into the gradient buffers, replacing previous contents.
    /// Parameters absent from `grads` get a zeroed buffer.
    pub fn set_grads(&mut self, grads: Gradients<T>) {
        let mut grads = grads.by_param;
        for (i, p) in self.params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            p.grad = Some(match grads.remove(&ParamId(i)) {
                Some(g) => g,
                None => Tensor::zeros(p.value.shape()),
            });
        }
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    pub(crate) by_param: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.by_param.iter()
    }

    pub fn require(&self, store: &ParamStore<T>, id: ParamId) -> Result<&Tensor<T>> {
        self.get(id)
            .ok_or_else(|| Error::MissingGradient(store.get(id).name.clone()))
    }
}

/// Non-learnable state (batch-norm running statistics).
#[derive(Debug, Clone, Default)]
pub struct BufferStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> BufferStore<T> {
    pub fn new() -> Self {
        BufferStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.names.push(name.into());
        self.values.push(value);
        BufferId(self.values.len() - 1)
    }

    pub fn get(&self, id: BufferId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<BufferId> {
        self.names.iter().position(|n| n == name).map(BufferId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
