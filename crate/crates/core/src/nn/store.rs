use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Non-learnable state such as batch-norm running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BufferId(pub usize);

/// A named learnable tensor, e.g. `backbone.stage3.block1.dw.conv.weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Parameter<T>>,
    names: BTreeMap<String, Slot>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Param(ParamId),
    Buffer(BufferId),
}

/// A pending write to a buffer, produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BufferUpdate<T> {
    pub id: BufferId,
    pub value: Vec<T>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), names: BTreeMap::new() }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::invalid(alloc::format!("duplicate parameter name `{name}`")));
        }
        self.names.insert(name.into(), slot);
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        let id = ParamId(self.params.len());
        self.claim(name, Slot::Param(id))?;
        self.params.push(Parameter { name: name.into(), tensor });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<BufferId> {
        let id = BufferId(self.buffers.len());
        self.claim(name, Slot::Buffer(id))?;
        self.buffers.push(Parameter { name: name.into(), tensor });
        Ok(id)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].tensor
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].tensor
    }

    pub fn lookup(&self, name: &str) -> Option<Slot> {
        self.names.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Parameter<T>] {
        &self.buffers
    }

    /// Parameters and buffers in registration order, parameters first.
    pub fn entries(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut().chain(self.buffers.iter_mut())
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn apply_updates(&mut self, updates: Vec<BufferUpdate<T>>) {
        for u in updates {
            self.buffers[u.id.0].tensor.data_mut().copy_from_slice(&u.value);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |p: &Parameter<T>| Parameter { name: p.name.clone(), tensor: p.tensor.cast() };
        ParamStore {
            params: self.params.iter().map(conv).collect(),
            buffers: self.buffers.iter().map(conv).collect(),
            names: self.names.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("a.weight", Tensor::zeros(&[2])).unwrap();
        assert!(s.add_param("a.weight", Tensor::zeros(&[2])).is_err());
        assert!(s.add_buffer("a.weight", Tensor::zeros(&[2])).is_err());
        assert_eq!(s.lookup("a.weight"), Some(Slot::Param(ParamId(0))));
    }
}
