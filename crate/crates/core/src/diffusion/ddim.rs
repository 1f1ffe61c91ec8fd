use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{gaussian, Denoiser, NoiseSchedule};
use crate::conditioning::{Condition, ConditionBatch};
use crate::error::{Error, Result};

/// Default bound on the predicted clean latent, in normalized latent units.
pub const X0_CLIP_BOUND: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
    pub seed: u64,
    /// `None` disables the x̂0 clamp.
    pub clip: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 200,
            guidance_scale: 3.0,
            eta: 0.0,
            seed: 0,
            clip: Some(X0_CLIP_BOUND),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > s.num_steps {
            return Err(Error::invalid(format!(
                "sampling steps must be in 1..={}, got {}",
                s.num_steps, self.num_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        if let Some(b) = self.clip {
            if !(b > 0.0) {
                return Err(Error::invalid("clip bound must be positive"));
            }
        }
        Ok(())
    }
}

/// `w·ε_c + (1−w)·ε_∅`.
pub fn cfg_combine(eps_cond: &Tensor, eps_null: &Tensor, w: f64) -> Result<Tensor> {
    if eps_cond.dims() != eps_null.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", eps_cond.dims(), eps_null.dims())));
    }
    Ok(((eps_cond * w)? + (eps_null * (1.0 - w))?)?)
}

pub fn x0_clip(xhat0: &Tensor, bound: f64) -> Result<Tensor> {
    Ok(xhat0.clamp(-bound, bound)?)
}

/// Descending, evenly spaced timesteps from `T` down to 1.
pub fn ddim_timesteps(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::invalid(format!("sampling steps must be in 1..={total}, got {n}")));
    }
    if n == 1 {
        return Ok(vec![total]);
    }
    Ok((0..n)
        .rev()
        .map(|i| (1.0 + (total - 1) as f64 * i as f64 / (n - 1) as f64).round() as usize)
        .collect())
}

/// Samples one latent of `shape` (without batch axis).
pub fn ddim_sample(
    denoiser: &impl Denoiser,
    cond: &Condition,
    null: Option<&Condition>,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    shape: &[usize],
) -> Result<Tensor> {
    let nulls = null.map(|n| vec![n]);
    let out = ddim_sample_batch(denoiser, &[cond], nulls.as_deref(), s, cfg, shape, &[cfg.seed])?;
    Ok(out.get(0)?)
}

/// Samples a batch, one latent per condition, each seeded independently so
/// results do not depend on batch composition. With `nulls = None` the
/// conditional prediction is used directly, bypassing guidance.
pub fn ddim_sample_batch(
    denoiser: &impl Denoiser,
    conds: &[&Condition],
    nulls: Option<&[&Condition]>,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    shape: &[usize],
    seeds: &[u64],
) -> Result<Tensor> {
    cfg.validate(s)?;
    let b = conds.len();
    if b == 0 || seeds.len() != b {
        return Err(Error::invalid(format!("{b} conditions but {} seeds", seeds.len())));
    }
    let first = &conds[0].sequence;
    let (dtype, dev) = (first.dtype(), first.device().clone());
    let mut x = Tensor::stack(
        &seeds
            .iter()
            .map(|&sd| gaussian(shape, &[sd, 0x2A7], dtype, &dev))
            .collect::<Result<Vec<_>>>()?,
        0,
    )?;
    let batch = match nulls {
        Some(n) => {
            if n.len() != b {
                return Err(Error::invalid("null conditions must pair with conditions"));
            }
            let all: Vec<&Condition> = conds.iter().chain(n.iter()).copied().collect();
            ConditionBatch::new(&all)?
        }
        None => ConditionBatch::new(conds)?,
    };
    let steps = ddim_timesteps(s.num_steps, cfg.num_steps)?;
    for (k, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(k + 1).copied().unwrap_or(0);
        let eps = match nulls {
            Some(_) => {
                let doubled = Tensor::cat(&[&x, &x], 0)?;
                let out = denoiser.predict(&doubled, &vec![t; 2 * b], &batch)?;
                cfg_combine(&out.narrow(0, 0, b)?, &out.narrow(0, b, b)?, cfg.guidance_scale)?
            }
            None => denoiser.predict(&x, &vec![t; b], &batch)?,
        };
        let ab = s.alpha_bar(t);
        let ab_prev = s.alpha_bar(t_prev);
        let mut x0 = ((&x - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        let mut eps = eps;
        if let Some(bound) = cfg.clip {
            x0 = x0_clip(&x0, bound)?;
            eps = ((&x - (&x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
        }
        let sigma = cfg.eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        x = ((x0 * ab_prev.sqrt())? + (eps * dir)?)?.detach();
        if sigma > 0.0 {
            let noise = Tensor::stack(
                &seeds
                    .iter()
                    .map(|&sd| gaussian(shape, &[sd, t as u64, 0x5167], dtype, &dev))
                    .collect::<Result<Vec<_>>>()?,
                0,
            )?;
            x = (x + (noise * sigma)?)?;
        }
    }
    let check = x.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    if check.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampled latent".into()));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_schedule;
    use candle_core::{DType, Device};

    #[test]
    fn timestep_subsequence() {
        assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![1000]);
        let s = ddim_timesteps(1000, 200).unwrap();
        assert_eq!(s.len(), 200);
        assert_eq!((s[0], s[199]), (1000, 1));
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(ddim_timesteps(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert!(ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn cfg_probe_and_errors() {
        let c = Tensor::new(&[1.0f64], &Device::Cpu).unwrap();
        let n = Tensor::new(&[0.5f64], &Device::Cpu).unwrap();
        assert_eq!(cfg_combine(&c, &n, 3.0).unwrap().to_vec1::<f64>().unwrap(), vec![2.0]);
        let bad = Tensor::new(&[0.5f64, 1.0], &Device::Cpu).unwrap();
        assert!(cfg_combine(&c, &bad, 3.0).is_err());
    }

    #[test]
    fn clip_cases() {
        let x = Tensor::new(&[0.5f64, -3.9, 40.0, -40.0], &Device::Cpu).unwrap();
        let y = x0_clip(&x, 4.0).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![0.5, -3.9, 4.0, -4.0]);
        let yy = x0_clip(&y, 4.0).unwrap();
        assert_eq!(yy.to_vec1::<f64>().unwrap(), y.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn sampler_validation() {
        let s = build_schedule(10, 1e-4, 0.02).unwrap();
        let cfg = SamplerConfig { num_steps: 11, ..Default::default() };
        assert!(cfg.validate(&s).is_err());
        let cfg = SamplerConfig { num_steps: 5, eta: 1.5, ..Default::default() };
        assert!(cfg.validate(&s).is_err());
        let c = Condition {
            sequence: Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap(),
            is_null: false,
        };
        let zero = |x: &Tensor, _: &[usize], _: &ConditionBatch| -> Result<Tensor> { Ok(x.zeros_like()?) };
        let bad = SamplerConfig { num_steps: 11, ..Default::default() };
        assert!(ddim_sample(&zero, &c, None, &s, &bad, &[2]).is_err());
    }
}
