use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Added to each covariance diagonal before the matrix square root.
pub const COV_EPS: f64 = 1e-6;
/// Floor applied to probabilities inside the paired KL.
pub const PROB_FLOOR: f64 = 1e-8;
const SIMPLEX_TOL: f64 = 1e-6;

fn gaussian_fit(set: &[Vec<f64>], which: &str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let e = set.first().map(|v| v.len()).unwrap_or(0);
    if e == 0 {
        return Err(Error::invalid(format!("embedding set {which} is empty")));
    }
    if set.len() < e + 1 {
        return Err(Error::invalid(format!(
            "embedding set {which} has {} vectors, needs at least {} for dimension {e}",
            set.len(),
            e + 1
        )));
    }
    if set.iter().any(|v| v.len() != e) {
        return Err(Error::shape(format!("embedding set {which} is ragged")));
    }
    if set.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("embedding set {which}")));
    }
    let n = set.len() as f64;
    let mut mu = DVector::zeros(e);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(e, e);
    for v in set {
        let d = DVector::from_column_slice(v) - &mu;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    for i in 0..e {
        cov[(i, i)] += COV_EPS;
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = gaussian_fit(a, "a")?;
    let (mu_b, cov_b) = gaussian_fit(b, "b")?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::shape(format!("embedding widths {} vs {}", mu_a.len(), mu_b.len())));
    }
    let ra = sym_sqrt(&cov_a);
    let inner = &ra * &cov_b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = (&mu_a - &mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0))
}

fn check_simplex(probs: &[Vec<f64>], which: &str) -> Result<usize> {
    let k = probs.first().map(|p| p.len()).unwrap_or(0);
    if k == 0 {
        return Err(Error::invalid(format!("{which}: no distributions")));
    }
    for (i, p) in probs.iter().enumerate() {
        if p.len() != k {
            return Err(Error::shape(format!("{which}: distribution {i} has {} entries, expected {k}", p.len())));
        }
        let s: f64 = p.iter().sum();
        if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("{which}: distribution {i} is off the simplex (sum {s})")));
        }
    }
    Ok(k)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR) / qi.max(PROB_FLOOR)).ln())
        .sum()
}

/// `exp(mean_i KL(p_i ‖ p̄))` with `p̄` the mean distribution.
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64> {
    let k = check_simplex(probs, "inception_score")?;
    let n = probs.len() as f64;
    let mut mean = vec![0.0; k];
    for p in probs {
        for (m, &x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let avg: f64 = probs.iter().map(|p| kl(p, &mean).max(0.0)).sum::<f64>() / n;
    Ok(avg.exp().clamp(1.0, k as f64))
}

/// Mean over pairs of `KL(ref_i ‖ gen_i)`.
pub fn paired_kl(gen: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if gen.len() != reference.len() {
        return Err(Error::invalid(format!(
            "paired_kl needs equal counts, got {} generated and {} reference",
            gen.len(),
            reference.len()
        )));
    }
    let kg = check_simplex(gen, "paired_kl generated")?;
    let kr = check_simplex(reference, "paired_kl reference")?;
    if kg != kr {
        return Err(Error::shape(format!("class counts {kg} vs {kr}")));
    }
    let total: f64 = gen.iter().zip(reference).map(|(g, r)| kl(r, g).max(0.0)).sum();
    Ok(total / gen.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_f64, rng_for};

    fn cloud(n: usize, e: usize, shift: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_for(&[seed]);
        (0..n)
            .map(|_| normal_f64(&mut rng, e).iter().zip(shift).map(|(x, s)| x + s).collect())
            .collect()
    }

    #[test]
    fn fd_basic_properties() {
        let a = cloud(200, 4, &[0.0; 4], 1);
        let b = cloud(200, 4, &[0.5, 0.0, -0.5, 1.0], 2);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab > 1.0);
    }

    #[test]
    fn fd_rejects_small_or_ragged_sets() {
        let a = cloud(4, 4, &[0.0; 4], 1);
        assert!(frechet_distance(&a, &a).is_err());
        let mut b = cloud(10, 4, &[0.0; 4], 1);
        b[3].pop();
        assert!(frechet_distance(&b, &b).is_err());
    }

    #[test]
    fn is_endpoints() {
        let k = 5;
        let onehots: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        assert!((inception_score(&onehots).unwrap() - k as f64).abs() < 1e-12);
        let same = vec![vec![0.1, 0.2, 0.3, 0.4]; 7];
        assert!((inception_score(&same).unwrap() - 1.0).abs() < 1e-12);
        assert!(inception_score(&[vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn paired_kl_cases() {
        let k = 8;
        let uniform = vec![vec![1.0 / k as f64; k]; 3];
        let onehot: Vec<Vec<f64>> = (0..3).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        assert!((paired_kl(&uniform, &onehot).unwrap() - (k as f64).ln()).abs() < 1e-9);
        assert_eq!(paired_kl(&uniform, &uniform).unwrap(), 0.0);
        assert!(paired_kl(&uniform, &onehot[..2]).is_err());
    }
}
