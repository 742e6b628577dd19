//! Named, seeded parameter storage shared by every network block.
//!
//! Parameters live in a `BTreeMap` so iteration order (and therefore the
//! optimizer and checkpoint layouts) is a pure function of the names.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a parameter drawn from `U(-bound, bound)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, shape, &values)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, &vec![value; n])
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::config(name, "parameter registered twice"));
        }
        let t = Tensor::from_slice(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a registered parameter with host values (row-major).
    pub fn assign(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::config(name, "unknown parameter"))?;
        assign_var(var, values)
    }
}

pub fn assign_var(var: &Var, values: &[f64]) -> Result<()> {
    if values.len() != var.elem_count() {
        return Err(Error::shape(format!(
            "assigning {} values to a parameter of shape {:?}",
            values.len(),
            var.dims()
        )));
    }
    let t = Tensor::from_slice(values, var.shape(), var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

pub fn zero_var(var: &Var) -> Result<()> {
    var.set(&var.zeros_like()?)?;
    Ok(())
}

/// Host copy of a parameter as `f64`, row-major.
pub fn var_values(var: &Var) -> Result<Vec<f64>> {
    Ok(var
        .as_tensor()
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?)
}
