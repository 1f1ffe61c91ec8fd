use crate::error::{Error, Result};

/// Linear β schedule with its cumulative products, indexed by `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub num_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn build_schedule(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..num_steps)
        .map(|i| {
            if num_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(num_steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        num_steps,
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    /// `ᾱ_t`, with `ᾱ_0 = 1`. Panics past `T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha_bar_checked(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.num_steps {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.num_steps)));
        }
        Ok(self.alpha_bar[t - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_endpoints() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        let brute: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        assert!((s.alpha_bar(1000) - brute).abs() < 1e-12);
        assert!(s.alpha_bar(1000) < 0.01);
        assert!(s.beta.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn near_zero_beta() {
        let s = build_schedule(10, 1e-12, 1e-12).unwrap();
        assert!((s.alpha_bar(10) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn invalid_bounds() {
        assert!(build_schedule(0, 1e-4, 0.02).is_err());
        assert!(build_schedule(10, 0.0, 0.02).is_err());
        assert!(build_schedule(10, 0.03, 0.02).is_err());
        assert!(build_schedule(10, 1e-4, 1.0).is_err());
        assert!(s_err(build_schedule(10, 1e-4, 0.02).unwrap()));
    }

    fn s_err(s: NoiseSchedule) -> bool {
        s.alpha_bar_checked(0).is_err() && s.alpha_bar_checked(11).is_err() && s.alpha_bar_checked(10).is_ok()
    }
}
