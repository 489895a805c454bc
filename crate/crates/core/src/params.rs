//! Named, seeded trainable parameters.
//!
//! Every learnable tensor in the pipeline (adapters, aggregation blocks,
//! branch weights, task heads) is registered here under a stable dotted
//! name. Modules keep clones of the underlying tensors; because a `Var`
//! shares storage with its tensor, optimizer updates and checkpoint loads
//! made through the store are visible to the modules.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a parameter drawn from N(0, std²) with the store's RNG.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        self.from_values(name, shape, values)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.from_values(name, shape, vec![value; n])
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.constant(name, shape, 0.0)
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Names of the parameters under a dotted prefix, e.g. `"agg."`.
    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.vars
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn digest(&self) -> Result<String> {
        tensor_digest(self.vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match
    /// exactly.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for name in tensors.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Checkpoint(format!("unexpected parameter {name}")));
            }
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::shape(format!("parameter {name}"), var.dims(), t.dims()));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

/// SHA-256 over names, shapes and values (widened to f64 so the digest is
/// independent of storage dtype width for f32/f64 data).
pub fn tensor_digest<'a>(tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}
