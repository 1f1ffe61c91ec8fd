//! Minimal neural-network plumbing on top of candle: a named, seeded
//! parameter store, the handful of layers the models need, Adam,
//! checkpoint containers and a finite-difference gradient checker.

mod adam;
mod checkpoint;
mod conv;
mod fused;
mod gradcheck;
mod layers;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::{fnv1a, rng_for};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{file_sha256, sha256_hex, Checkpoint};
pub use gradcheck::{grad_check, random_probes, GradCheckReport, ProbeResult};
pub use layers::{silu, upsample2x, Conv2d, CrossAttention, GroupNorm, Linear, GROUPS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Normal(f64),
}

/// Named trainable parameters. Initial values come from a generator keyed
/// by `(seed, name)`, so they do not depend on construction order.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    seed: u64,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            seed,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Creates parameter `name`, or returns the existing one if the shape matches.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::shape(format!("parameter {name} exists with shape {:?}, requested {shape:?}", v.dims())));
            }
            return Ok(v.as_tensor().clone());
        }
        let t = self.init_tensor(name, shape, init, self.seed)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn init_tensor(&self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = rng_for(&[seed, fnv1a(name.as_bytes())]);
                (0..n).map(|_| rand::Rng::random_range(&mut rng, -bound..bound)).collect()
            }
            Init::Normal(std) => {
                let mut rng = rng_for(&[seed, fnv1a(name.as_bytes())]);
                crate::rng::normal_f64(&mut rng, n).into_iter().map(|v| v * std).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Overwrites `name` with a fresh draw under a different seed.
    pub fn reinit(&self, name: &str, init: Init, seed: u64) -> Result<()> {
        let var = self.var(name)?;
        let t = self.init_tensor(name, var.dims(), init, seed)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of all parameters, in `dtype`.
    pub fn snapshot(&self, dtype: DType) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().to_dtype(dtype)?.copy()?)))
            .collect()
    }

    /// Copies values for every parameter whose name (after stripping
    /// `prefix`) appears in `tensors`. Returns the names that were not found.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<Vec<String>> {
        let mut missing = Vec::new();
        for (name, var) in &self.vars {
            match tensors.get(&format!("{prefix}{name}")) {
                Some(t) => {
                    if t.dims() != var.dims() {
                        return Err(Error::shape(format!(
                            "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                            t.dims(),
                            var.dims()
                        )));
                    }
                    var.set(&t.to_dtype(self.dtype)?)?;
                }
                None => missing.push(name.clone()),
            }
        }
        Ok(missing)
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if s.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Loss history of a training run.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    /// `(step, loss)` for every optimizer step.
    pub train: Vec<(usize, f64)>,
    /// `(step, loss)` at each validation pass.
    pub valid: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_valid: f64,
}

impl TrainLog {
    /// Mean training loss over the `window` steps ending at `step` (inclusive).
    pub fn smoothed(&self, step: usize, window: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .train
            .iter()
            .filter(|(s, _)| *s <= step && *s + window > step)
            .map(|(_, l)| *l)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Mean of a scalar-valued tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.mean(0)?.to_scalar::<f64>()?)
}
