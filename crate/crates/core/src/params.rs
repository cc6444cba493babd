//! Named, seeded parameter storage.
//!
//! Every learnable tensor lives in a [`ParamStore`] under a hierarchical dotted
//! name (`stages.0.blocks.1.attn.q.weight`). Initialization draws from a
//! ChaCha stream owned by the caller, so the same seed always produces the
//! same parameters regardless of the tensor backend's own RNG.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// One learnable tensor plus its optimizer treatment.
#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    /// Whether decoupled weight decay applies. Off for norms, biases and gate matrices.
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: BTreeMap<String, Param>,
    frozen: bool,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            device: device.clone(),
            dtype,
            params: BTreeMap::new(),
            frozen: false,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Frozen stores hand no parameters to the optimizer.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut ChaCha8Rng) -> ParamBuilder<'a> {
        ParamBuilder {
            store: self,
            rng,
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    /// Parameters the optimizer may update; empty when frozen.
    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Param)> {
        let frozen = self.frozen;
        self.params.iter().filter(move |_| !frozen)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Exact number of learnable scalars.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.var.elem_count()).sum()
    }

    /// Deep copies of every parameter, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameters from named tensors. Every stored name must be present
    /// with a matching shape.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in &self.params {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.dims() != p.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                    p.var.dims(),
                    t.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    fn insert(&mut self, name: String, tensor: Tensor, decay: bool) -> Result<Tensor> {
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        self.params.insert(name, Param { var, decay });
        Ok(t)
    }
}

/// Scoped view into a [`ParamStore`] that creates parameters under a name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn pp(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn tensor(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?)
    }

    /// Uniform in `±1/sqrt(fan_in)` (Kaiming-uniform with `a = sqrt(5)`).
    pub fn kaiming_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let t = self.tensor(data, shape)?;
        self.store.insert(self.full_name(name), t, true)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, decay: bool) -> Result<Tensor> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        let t = self.tensor(data, shape)?;
        self.store.insert(self.full_name(name), t, decay)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, decay: bool) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let t = self.tensor(vec![value; n], shape)?;
        self.store.insert(self.full_name(name), t, decay)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], decay: bool) -> Result<Tensor> {
        self.constant(name, shape, 0.0, decay)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize], decay: bool) -> Result<Tensor> {
        self.constant(name, shape, 1.0, decay)
    }

    /// Registers an explicit tensor as a parameter.
    pub fn from_tensor(&mut self, name: &str, tensor: &Tensor, decay: bool) -> Result<Tensor> {
        let t = tensor.to_dtype(self.store.dtype)?;
        self.store.insert(self.full_name(name), t, decay)
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_are_hierarchical_and_unique() {
        let mut store = ParamStore::new(DType::F32, &Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        {
            let mut b = store.builder(&mut rng);
            let mut enc = b.pp("enc");
            enc.pp("fc").kaiming_uniform("weight", &[3, 2], 2).unwrap();
            enc.pp("fc").zeros("bias", &[3], false).unwrap();
            assert!(enc.pp("fc").zeros("bias", &[3], false).is_err());
        }
        let names: Vec<_> = store.iter().map(|(k, _)| k.clone()).collect();
        assert_eq!(names, vec!["enc.fc.bias", "enc.fc.weight"]);
        assert_eq!(store.count(), 9);
    }

    #[test]
    fn frozen_store_exposes_nothing_trainable() {
        let mut store = ParamStore::new(DType::F32, &Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.builder(&mut rng).ones("w", &[2], true).unwrap();
        assert_eq!(store.trainable().count(), 1);
        store.set_frozen(true);
        assert_eq!(store.trainable().count(), 0);
    }
}
