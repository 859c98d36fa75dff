use std::collections::BTreeMap;

use rand::Rng;

use super::graph::StatUpdate;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Learnable tensor with a checkpoint name.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Non-learnable state saved with the model (running statistics).
#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

/// Ordered set of named parameters and buffers. Names are unique across both.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    names: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name, Slot::Param(self.params.len()))?;
        self.params.push(Parameter { name, tensor: tensor.with_requires_grad(true) });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name, Slot::Buffer(self.buffers.len()))?;
        self.buffers.push(Buffer { name, tensor });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        match self.names.get(name) {
            Some(Slot::Buffer(i)) => Some(BufferId(*i)),
            _ => None,
        }
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.tensor.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Exponential moving average of batch-norm statistics.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate], momentum: f64) {
        for u in updates {
            let m = self.buffers[u.mean_buffer.0].tensor.data_mut();
            m.iter_mut().zip(&u.batch_mean).for_each(|(r, b)| *r = (1.0 - momentum) * *r + momentum * b);
            let v = self.buffers[u.var_buffer.0].tensor.data_mut();
            v.iter_mut().zip(&u.batch_var_unbiased).for_each(|(r, b)| *r = (1.0 - momentum) * *r + momentum * b);
        }
    }

    /// Overwrites values of every entry whose name appears in `other`.
    /// Shapes must agree. Returns how many entries were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(id) = other.find(&p.name) {
                let src = &other.get(id).tensor;
                if src.shape() != p.tensor.shape() {
                    return Err(Error::shape("copy_matching", format!("{}: {:?} vs {:?}", p.name, src.shape(), p.tensor.shape())));
                }
                p.tensor.data_mut().copy_from_slice(src.data());
                n += 1;
            }
        }
        for b in &mut self.buffers {
            if let Some(id) = other.find_buffer(&b.name) {
                let src = &other.buffer(id).tensor;
                if src.shape() != b.tensor.shape() {
                    return Err(Error::shape("copy_matching", format!("{}: {:?} vs {:?}", b.name, src.shape(), b.tensor.shape())));
                }
                b.tensor.data_mut().copy_from_slice(src.data());
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Uniform initialisation in `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[2])).is_err());
        assert!(s.add_buffer("a", Tensor::zeros(&[2])).is_err());
        assert!(s.find("a").is_some());
        assert!(s.find_buffer("a").is_none());
    }
}
