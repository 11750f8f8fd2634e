//! Named, deterministically initialized trainable parameters.
//!
//! Initialization never touches the device RNG: every parameter is drawn from
//! the caller-supplied ChaCha stream in creation order, so a fixed global seed
//! yields bit-identical models. Values are drawn in f64 and cast to the store
//! dtype, which keeps f32 and f64 builds of the same architecture aligned for
//! finite-difference checks.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Device and dtype a model is materialized with.
#[derive(Debug, Clone)]
pub struct TensorEnv {
    pub device: Device,
    pub dtype: DType,
}

impl TensorEnv {
    pub fn cpu(dtype: DType) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
        }
    }

    pub fn cpu_f32() -> Self {
        Self::cpu(DType::F32)
    }

    pub fn cpu_f64() -> Self {
        Self::cpu(DType::F64)
    }
}

/// Initialization scheme for one parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { std: f64 },
    /// Identity matrix; shape must be square 2-D.
    Identity,
}

/// Ordered map of parameter name -> trainable `Var`.
pub struct ParamStore {
    env: TensorEnv,
    names: Vec<String>,
    vars: HashMap<String, Var>,
    rng: ChaCha20Rng,
}

impl ParamStore {
    pub fn new(env: TensorEnv, init_rng: ChaCha20Rng) -> Self {
        Self {
            env,
            names: Vec::new(),
            vars: HashMap::new(),
            rng: init_rng,
        }
    }

    pub fn env(&self) -> &TensorEnv {
        &self.env
    }

    /// Create a parameter. Names must be unique within the store.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Const(c) => vec![c; numel],
            Init::Normal { std } => (0..numel)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::Identity => {
                if shape.len() != 2 || shape[0] != shape[1] {
                    return Err(Error::contract(format!(
                        "identity init needs a square matrix, got {shape:?}"
                    )));
                }
                let n = shape[0];
                let mut v = vec![0.0; numel];
                for i in 0..n {
                    v[i * n + i] = 1.0;
                }
                v
            }
        };
        let tensor = Tensor::from_vec(values, shape, &self.env.device)?.to_dtype(self.env.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        self.names.push(name.to_string());
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Parameter names in creation order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// (name, var) pairs in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.names
            .iter()
            .map(move |n| (n.as_str(), self.vars.get(n).expect("name tracked")))
    }

    /// Vars whose name starts with any of `prefixes`, in creation order.
    pub fn vars_with_prefixes(&self, prefixes: &[&str]) -> Vec<Var> {
        self.iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.iter().map(|(_, v)| v.clone()).collect()
    }

    /// Overwrite parameter values from `tensors`. Every store parameter must
    /// be present with a matching shape; extra entries are rejected.
    pub fn load(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let mut missing = Vec::new();
        for name in &self.names {
            match tensors.get(name) {
                None => missing.push(name.clone()),
                Some(t) => {
                    let var = self.vars.get(name).expect("name tracked");
                    if t.dims() != var.dims() {
                        return Err(Error::StructuralMismatch(format!(
                            "tensor {name}: checkpoint shape {:?} vs model shape {:?}",
                            t.dims(),
                            var.dims()
                        )));
                    }
                    var.set(&t.to_dtype(self.env.dtype)?)?;
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::StructuralMismatch(format!(
                "checkpoint is missing tensors: {}",
                missing.join(", ")
            )));
        }
        let extra: Vec<&String> = tensors
            .keys()
            .filter(|k| !self.vars.contains_key(*k))
            .collect();
        if !extra.is_empty() {
            let mut extra: Vec<String> = extra.into_iter().cloned().collect();
            extra.sort();
            return Err(Error::StructuralMismatch(format!(
                "checkpoint has unknown tensors: {}",
                extra.join(", ")
            )));
        }
        Ok(())
    }

    /// Overwrite only the parameters named in `tensors`. Names the store does
    /// not know and shape mismatches are rejected; parameters absent from
    /// `tensors` keep their current values.
    pub fn load_subset(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, t) in tensors {
            let var = self.vars.get(name).ok_or_else(|| {
                Error::StructuralMismatch(format!("tensor {name} has no matching parameter"))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::StructuralMismatch(format!(
                    "tensor {name}: checkpoint shape {:?} vs model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.env.dtype)?)?;
        }
        Ok(())
    }

    /// Hex SHA-256 digest per parameter, keyed by name. Hashing goes through
    /// the f32 little-endian wire representation so that a round trip through
    /// a checkpoint keeps hashes stable.
    pub fn hashes(&self) -> Result<HashMap<String, String>> {
        let mut out = HashMap::new();
        for (name, var) in self.iter() {
            out.insert(name.to_string(), tensor_hash(var.as_tensor())?);
        }
        Ok(out)
    }
}

/// SHA-256 over the tensor's f32 little-endian bytes.
pub fn tensor_hash(t: &Tensor) -> Result<String> {
    let data = tensor_to_f32_bytes(t)?;
    let mut hasher = Sha256::new();
    hasher.update(&data);
    Ok(hex::encode(hasher.finalize()))
}

pub fn tensor_to_f32_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let mut bytes = Vec::with_capacity(flat.len() * 4);
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

/// Build a tensor of standard normal draws from `rng` (independent of the
/// store, used for noise rather than parameters).
pub fn randn(rng: &mut ChaCha20Rng, shape: &[usize], env: &TensorEnv) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let values: Vec<f64> = (0..numel)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Ok(Tensor::from_vec(values, shape, &env.device)?.to_dtype(env.dtype)?)
}

/// Uniform draw in [0, 1) as a tensor.
pub fn rand_uniform(rng: &mut ChaCha20Rng, shape: &[usize], env: &TensorEnv) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let values: Vec<f64> = (0..numel).map(|_| rng.gen::<f64>()).collect();
    Ok(Tensor::from_vec(values, shape, &env.device)?.to_dtype(env.dtype)?)
}
