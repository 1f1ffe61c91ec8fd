//! Noise schedule, forward process, noise-prediction loss, classifier-free
//! guidance and DDIM sampling.

mod ddim;
mod schedule;

use candle_core::{DType, Device, Tensor};

use crate::conditioning::ConditionBatch;
use crate::error::{Error, Result};
use crate::rng::{normal_f64, rng_for};

pub use ddim::{cfg_combine, ddim_sample, ddim_sample_batch, ddim_timesteps, x0_clip, SamplerConfig, X0_CLIP_BOUND};
pub use schedule::{build_schedule, NoiseSchedule};

/// Anything that predicts the noise in `x_t` for a batch of timesteps and conditions.
pub trait Denoiser {
    fn predict(&self, x_t: &Tensor, ts: &[usize], cond: &ConditionBatch) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, &[usize], &ConditionBatch) -> Result<Tensor>,
{
    fn predict(&self, x_t: &Tensor, ts: &[usize], cond: &ConditionBatch) -> Result<Tensor> {
        self(x_t, ts, cond)
    }
}

/// Standard normal tensor of `shape` drawn from the stream keyed by `parts`.
pub fn gaussian(shape: &[usize], parts: &[u64], dtype: DType, dev: &Device) -> Result<Tensor> {
    let n = shape.iter().product();
    let mut rng = rng_for(parts);
    Ok(Tensor::from_vec(normal_f64(&mut rng, n), shape, dev)?.to_dtype(dtype)?)
}

/// `√ᾱ_t z0 + √(1−ᾱ_t) ε` for a single timestep.
pub fn forward_marginal(z0: &Tensor, t: usize, s: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    if z0.dims() != noise.dims() {
        return Err(Error::shape(format!("latent {:?} vs noise {:?}", z0.dims(), noise.dims())));
    }
    let ab = s.alpha_bar_checked(t)?;
    Ok(((z0 * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
}

/// Per-sample forward marginal for a batch `(B, ...)` with one timestep per sample.
pub fn forward_marginal_batch(z0: &Tensor, ts: &[usize], s: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    if z0.dims() != noise.dims() {
        return Err(Error::shape(format!("latent {:?} vs noise {:?}", z0.dims(), noise.dims())));
    }
    let b = z0.dim(0)?;
    if ts.len() != b {
        return Err(Error::shape(format!("{} timesteps for a batch of {b}", ts.len())));
    }
    let mut a = Vec::with_capacity(b);
    let mut c = Vec::with_capacity(b);
    for &t in ts {
        let ab = s.alpha_bar_checked(t)?;
        a.push(ab.sqrt());
        c.push((1.0 - ab).sqrt());
    }
    let mut bshape = vec![1usize; z0.rank()];
    bshape[0] = b;
    let a = Tensor::from_vec(a, bshape.as_slice(), z0.device())?.to_dtype(z0.dtype())?;
    let c = Tensor::from_vec(c, bshape.as_slice(), z0.device())?.to_dtype(z0.dtype())?;
    Ok((z0.broadcast_mul(&a)? + noise.broadcast_mul(&c)?)?)
}

/// Noise for each sample of a batch, sample `i` drawn from `(seed, i)`.
pub fn batch_noise(shape: &[usize], seed: u64, dtype: DType, dev: &Device) -> Result<Tensor> {
    let b = shape[0];
    let per: Vec<Tensor> = (0..b)
        .map(|i| gaussian(&shape[1..], &[seed, i as u64, 0xE95], dtype, dev))
        .collect::<Result<_>>()?;
    Ok(Tensor::stack(&per, 0)?)
}

/// Mean squared error between the drawn noise and the denoiser's prediction
/// on `z_t`. Returns a differentiable scalar.
pub fn training_loss(
    denoiser: &impl Denoiser,
    z0: &Tensor,
    cond: &ConditionBatch,
    ts: &[usize],
    s: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let noise = batch_noise(z0.dims(), seed, z0.dtype(), z0.device())?;
    let z_t = forward_marginal_batch(z0, ts, s, &noise)?;
    let pred = denoiser.predict(&z_t, ts, cond)?;
    if pred.dims() != noise.dims() {
        return Err(Error::shape(format!("denoiser returned {:?}, expected {:?}", pred.dims(), noise.dims())));
    }
    let loss = (pred - noise)?.sqr()?.mean_all()?;
    let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("denoiser loss is {v}")));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{Condition, ConditionBatch};

    fn dummy_cond() -> ConditionBatch {
        let c = Condition {
            sequence: Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap(),
            is_null: false,
        };
        ConditionBatch::new(&[&c, &c]).unwrap()
    }

    #[test]
    fn marginal_limits() {
        let dev = Device::Cpu;
        let z0 = Tensor::new(&[1.0f64, -2.0, 3.0], &dev).unwrap();
        let eps = Tensor::new(&[0.5f64, 0.25, -1.0], &dev).unwrap();
        let tiny = build_schedule(10, 1e-12, 1e-12).unwrap();
        let z = forward_marginal(&z0, 10, &tiny, &eps).unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in z.iter().zip([1.0, -2.0, 3.0]) {
            assert!((a - b).abs() < 1e-5);
        }
        let heavy = build_schedule(10, 0.999, 0.999).unwrap();
        let z = forward_marginal(&z0, 10, &heavy, &eps).unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in z.iter().zip([0.5, 0.25, -1.0]) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(forward_marginal(&z0, 0, &heavy, &eps).is_err());
        assert!(forward_marginal(&z0, 11, &heavy, &eps).is_err());
    }

    #[test]
    fn oracle_denoiser_has_zero_loss() {
        let dev = Device::Cpu;
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let z0 = gaussian(&[2, 3, 4, 4], &[1], DType::F64, &dev).unwrap();
        let ts = [17usize, 800];
        let z0c = z0.clone();
        let sc = s.clone();
        let oracle = move |z_t: &Tensor, ts: &[usize], _: &ConditionBatch| -> Result<Tensor> {
            let zero = Tensor::zeros_like(&z0c)?;
            let scaled = forward_marginal_batch(&z0c, ts, &sc, &zero)?;
            let sig: Vec<f64> = ts.iter().map(|&t| (1.0 - sc.alpha_bar(t)).sqrt()).collect();
            let sig = Tensor::from_vec(sig, (ts.len(), 1, 1, 1), z_t.device())?;
            Ok((z_t - scaled)?.broadcast_div(&sig)?)
        };
        let loss = training_loss(&oracle, &z0, &dummy_cond(), &ts, &s, 5).unwrap();
        assert!(loss.to_scalar::<f64>().unwrap() < 1e-20);
    }

    #[test]
    fn zero_denoiser_loss_is_noise_power() {
        let dev = Device::Cpu;
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let z0 = Tensor::zeros((2, 4, 32, 32), DType::F64, &dev).unwrap();
        let zero = |x: &Tensor, _: &[usize], _: &ConditionBatch| -> Result<Tensor> { Ok(x.zeros_like()?) };
        let loss = training_loss(&zero, &z0, &dummy_cond(), &[3, 900], &s, 9).unwrap();
        let l = loss.to_scalar::<f64>().unwrap();
        // mean of n = 8192 squared unit normals: sd = sqrt(2/n)
        assert!((l - 1.0).abs() < 3.0 * (2.0f64 / 8192.0).sqrt(), "{l}");
    }
}
