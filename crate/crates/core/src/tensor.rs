//! Small tensor helpers shared by the model, trainer, and samplers: seeded
//! random tensors (all randomness flows through caller-owned ChaCha streams)
//! and a named parameter store with gradient access.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Standard-normal tensor drawn from the given stream, row-major fill.
pub fn randn<S: Into<candle_core::Shape>>(
    rng: &mut ChaCha8Rng,
    shape: S,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let n = shape.elem_count();
    let draws: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let t = Tensor::from_vec(draws, shape, device)?;
    Ok(if dtype == DType::F32 { t } else { t.to_dtype(dtype)? })
}

/// Uniform tensor on [lo, hi).
pub fn rand_uniform<S: Into<candle_core::Shape>>(
    rng: &mut ChaCha8Rng,
    shape: S,
    lo: f32,
    hi: f32,
    device: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let n = shape.elem_count();
    let draws: Vec<f32> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Ok(Tensor::from_vec(draws, shape, device)?)
}

/// Weight initialisation modes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform Kaiming-style bound: +-sqrt(1/fan_in).
    KaimingUniform { fan_in: usize },
    Normal { std: f64 },
}

/// Named trainable parameters in deterministic (sorted) order.
pub struct ParamStore {
    pub device: Device,
    pub dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        Self::with_dtype(device, DType::F32)
    }

    /// Store parameters at a non-default precision (f64 for gradient
    /// checking). Initial draws always happen at f32 so values match the
    /// f32 store bit-for-bit after conversion.
    pub fn with_dtype(device: Device, dtype: DType) -> Self {
        ParamStore { device, dtype, vars: BTreeMap::new() }
    }

    /// Create (or fetch an existing) parameter. Shapes must agree on reuse.
    pub fn get<S: Into<candle_core::Shape>>(
        &mut self,
        name: &str,
        shape: S,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let shape = shape.into();
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape.dims() {
                return Err(Error::Shape(format!(
                    "parameter {name}: requested {:?}, stored {:?}",
                    shape.dims(),
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let t = match init {
            Init::Zeros => Tensor::zeros(shape, DType::F32, &self.device)?,
            Init::Ones => Tensor::ones(shape, DType::F32, &self.device)?,
            Init::KaimingUniform { fan_in } => {
                let bound = (1.0 / fan_in.max(1) as f32).sqrt();
                rand_uniform(rng, shape, -bound, bound, &self.device)?
            }
            Init::Normal { std } => randn(rng, shape, DType::F32, &self.device)?
                .affine(std, 0.0)?,
        };
        let t = if t.dtype() == self.dtype { t } else { t.to_dtype(self.dtype)? };
        let v = Var::from_tensor(&t)?;
        let t = v.as_tensor().clone();
        self.vars.insert(name.to_string(), v);
        Ok(t)
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
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

    pub fn param_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter's value in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if v.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name}: value {:?} vs stored {:?}",
                value.dims(),
                v.dims()
            )));
        }
        v.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Flat f32 snapshot of every parameter, in name order.
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        let mut out = Vec::with_capacity(self.vars.len());
        for (name, v) in &self.vars {
            let dims = v.dims().to_vec();
            let flat = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            out.push((name.clone(), dims, flat));
        }
        Ok(out)
    }
}

/// Global L2 norm over a set of tensors.
pub fn global_norm(tensors: &[Tensor]) -> Result<f64> {
    let mut total = 0.0f64;
    for t in tensors {
        let sq = t.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        total += sq;
    }
    Ok(total.sqrt())
}
