use candle_core::{DType, Tensor};
use rand::Rng;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// The loss graph does not reach this parameter.
    pub detached: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<ProbeResult>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn detached(&self) -> Vec<&ProbeResult> {
        self.probes.iter().filter(|p| p.detached).collect()
    }
}

/// `n` probe locations: a tensor chosen uniformly, then an entry within it.
pub fn random_probes(ps: &ParamStore, n: usize, seed: u64) -> Vec<(String, usize)> {
    let vars: Vec<_> = ps.vars().map(|(k, v)| (k.clone(), v.elem_count())).collect();
    if vars.is_empty() {
        return Vec::new();
    }
    let mut rng = rng_for(&[seed, 0x6AD]);
    (0..n)
        .map(|_| {
            let (name, len) = &vars[rng.random_range(0..vars.len())];
            (name.clone(), rng.random_range(0..*len))
        })
        .collect()
}

fn perturb(ps: &ParamStore, name: &str, index: usize, delta: f64) -> Result<()> {
    let var = ps.var(name)?;
    let shape = var.dims().to_vec();
    let mut flat = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    flat[index] += delta;
    var.set(&Tensor::from_vec(flat, shape, ps.device())?)?;
    Ok(())
}

fn eval(loss_fn: &impl Fn() -> Result<Tensor>) -> Result<f64> {
    let l = loss_fn()?.to_scalar::<f64>()?;
    if !l.is_finite() {
        return Err(Error::NonFinite(format!("loss is {l}")));
    }
    Ok(l)
}

/// Compares the autodiff gradient of `loss_fn` against central differences
/// at each probe. The store must hold `f64` parameters and `loss_fn` must
/// return a scalar built from the store's current values.
pub fn grad_check(
    ps: &ParamStore,
    probes: &[(String, usize)],
    loss_fn: impl Fn() -> Result<Tensor>,
) -> Result<GradCheckReport> {
    if ps.dtype() != DType::F64 {
        return Err(Error::invalid("gradient check requires f64 parameters"));
    }
    let grads = loss_fn()?.backward()?;
    let mut results = Vec::with_capacity(probes.len());
    for (name, index) in probes {
        let var = ps.var(name)?;
        if *index >= var.elem_count() {
            return Err(Error::invalid(format!("probe index {index} out of range for {name}")));
        }
        let (analytic, detached) = match grads.get(var.as_tensor()) {
            Some(g) => (g.flatten_all()?.get(*index)?.to_scalar::<f64>()?, false),
            None => (0.0, true),
        };
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}[{index}] is {analytic}")));
        }
        perturb(ps, name, *index, FD_STEP)?;
        let plus = eval(&loss_fn);
        perturb(ps, name, *index, -2.0 * FD_STEP)?;
        let minus = eval(&loss_fn);
        perturb(ps, name, *index, FD_STEP)?;
        let numeric = (plus? - minus?) / (2.0 * FD_STEP);
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        results.push(ProbeResult {
            param: name.clone(),
            index: *index,
            analytic,
            numeric,
            rel_error,
            detached,
        });
    }
    let max_rel_error = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes: results,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, Init};
    use candle_core::Device;

    #[test]
    fn single_conv_is_exact() {
        let mut ps = ParamStore::new(DType::F64, 3);
        let conv = Conv2d::new(&mut ps, "c", 2, 3, 3, 1).unwrap();
        ps.reinit("c.bias", Init::Normal(0.1), 4).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 2, 5, 4), &Device::Cpu).unwrap();
        let target = Tensor::randn(0f64, 1.0, (1, 3, 5, 4), &Device::Cpu).unwrap();
        // linear net, loss linear in params: central differences are exact
        let probes = random_probes(&ps, 32, 1);
        let report = grad_check(&ps, &probes, || Ok((conv.forward(&x)? * &target)?.sum_all()?)).unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
        assert!(report.detached().is_empty());
    }

    #[test]
    fn detached_parameter_is_flagged() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let a = ps.param("a", &[4], Init::Normal(1.0)).unwrap();
        ps.param("unused", &[4], Init::Normal(1.0)).unwrap();
        let probes = vec![("a".to_string(), 1), ("unused".to_string(), 2)];
        let report = grad_check(&ps, &probes, || Ok(a.sqr()?.sum_all()?)).unwrap();
        let det = report.detached();
        assert_eq!(det.len(), 1);
        assert_eq!(det[0].param, "unused");
        assert_eq!(det[0].analytic, 0.0);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn rejects_f32_store() {
        let ps = ParamStore::new(DType::F32, 0);
        assert!(grad_check(&ps, &[], || Ok(Tensor::new(0f64, &Device::Cpu)?)).is_err());
    }
}
