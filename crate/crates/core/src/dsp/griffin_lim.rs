//! Mel-spectrogram inversion: non-negative mel → linear power inversion
//! followed by fast Griffin-Lim phase recovery.

use nalgebra::DMatrix;
use rand::Rng;
use rustfft::num_complex::Complex;

use super::mel::{mel_filterbank, power_norm, MelFilterbank, LOG_FLOOR};
use super::stft::{Spectrogram, StftEngine};
use super::{MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const DEFAULT_GL_ITERS: usize = 64;

#[derive(Clone, Copy, Debug)]
pub struct GriffinLimOptions {
    pub iters: usize,
    /// Fast Griffin-Lim momentum; 0 gives the classic algorithm.
    pub momentum: f64,
    /// Multiplicative NNLS refinement steps applied after the pseudo-inverse.
    pub nnls_iters: usize,
    pub seed: u64,
}

impl Default for GriffinLimOptions {
    fn default() -> Self {
        Self {
            iters: DEFAULT_GL_ITERS,
            momentum: 0.99,
            nnls_iters: 200,
            seed: 0,
        }
    }
}

pub fn griffin_lim(m: &MelSpectrogram, iters: usize) -> Result<Waveform> {
    griffin_lim_with(m, &GriffinLimOptions { iters, ..Default::default() })
}

pub fn griffin_lim_with(m: &MelSpectrogram, opts: &GriffinLimOptions) -> Result<Waveform> {
    if opts.iters == 0 {
        return Err(Error::invalid("griffin_lim needs at least one iteration"));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("mel spectrogram passed to griffin_lim".into()));
    }
    let cfg = &m.config;
    let fb = mel_filterbank(cfg)?;
    let magnitude = mel_to_magnitude(m, &fb, opts.nnls_iters);
    let engine = StftEngine::new(cfg.fft_size, cfg.hop_size);
    let bins = engine.bins();
    let frames = m.frames;

    let mut rng = rng_for(&[opts.seed, 0x6711]);
    let mut angles: Vec<Complex<f64>> = (0..frames * bins)
        .map(|_| Complex::from_polar(1.0, rng.random::<f64>() * std::f64::consts::TAU))
        .collect();
    let mut prev = vec![Complex::new(0.0, 0.0); frames * bins];
    let mut spec = Spectrogram { frames, bins, data: vec![Complex::new(0.0, 0.0); frames * bins] };
    let alpha = opts.momentum / (1.0 + opts.momentum);
    let length = cfg.hop_size * frames.saturating_sub(1);

    for _ in 0..opts.iters {
        for ((s, a), mag) in spec.data.iter_mut().zip(&angles).zip(&magnitude) {
            *s = a * *mag;
        }
        let x = engine.istft(&spec, Some(length));
        let rebuilt = engine.stft(&x);
        for ((a, r), p) in angles.iter_mut().zip(&rebuilt.data).zip(prev.iter_mut()) {
            let v = r - *p * alpha;
            let n = v.norm();
            *a = if n > 1e-16 { v / n } else { Complex::new(1.0, 0.0) };
            *p = *r;
        }
    }
    for ((s, a), mag) in spec.data.iter_mut().zip(&angles).zip(&magnitude) {
        *s = a * *mag;
    }
    let samples = engine
        .istft(&spec, Some(length))
        .into_iter()
        .map(|v| (v as f32).clamp(-1.0, 1.0))
        .collect();
    Waveform::new(samples, cfg.rate_hz)
}

/// Linear STFT magnitudes (`frames × bins`) whose mel projection best
/// matches `m` under a non-negativity constraint.
fn mel_to_magnitude(m: &MelSpectrogram, fb: &MelFilterbank, nnls_iters: usize) -> Vec<f64> {
    let (nm, nb) = (fb.mel_dim, fb.n_bins);
    let basis = DMatrix::from_row_slice(nm, nb, &fb.weights);
    let pinv = basis
        .clone()
        .pseudo_inverse(1e-10)
        .expect("SVD of a mel filterbank converges");
    let norm = power_norm(m.config.fft_size);
    let floor = LOG_FLOOR + 1e-4;
    // nonzero bin range of each band
    let support: Vec<(usize, usize)> = (0..nm)
        .map(|b| {
            let row = fb.row(b);
            let lo = row.iter().position(|&w| w > 0.0).unwrap_or(0);
            let hi = row.iter().rposition(|&w| w > 0.0).map_or(0, |i| i + 1);
            (lo, hi.max(lo))
        })
        .collect();
    let mut out = Vec::with_capacity(m.frames * nb);
    for f in 0..m.frames {
        let target: Vec<f64> = m
            .row(f)
            .iter()
            .map(|&v| if v <= floor { 0.0 } else { (v as f64).exp() })
            .collect();
        if target.iter().all(|&t| t == 0.0) {
            out.extend(std::iter::repeat(0.0).take(nb));
            continue;
        }
        let t = nalgebra::DVector::from_vec(target.clone());
        let mut s: Vec<f64> = (&pinv * &t).iter().map(|v| v.max(1e-12)).collect();
        // Lee-Seung multiplicative updates for min ||B s - t||² with s >= 0.
        let mut bt_t = vec![0.0; nb];
        for (b, &(lo, hi)) in support.iter().enumerate() {
            for k in lo..hi {
                bt_t[k] += fb.weights[b * nb + k] * target[b];
            }
        }
        let mut denom = vec![0.0; nb];
        for _ in 0..nnls_iters {
            denom.fill(0.0);
            for (b, &(lo, hi)) in support.iter().enumerate() {
                let row = &fb.weights[b * nb..(b + 1) * nb];
                let proj: f64 = (lo..hi).map(|k| row[k] * s[k]).sum();
                for k in lo..hi {
                    denom[k] += row[k] * proj;
                }
            }
            for k in 0..nb {
                if denom[k] > 0.0 {
                    s[k] *= bt_t[k] / denom[k];
                }
            }
        }
        out.extend(s.iter().map(|&p| (p / norm).max(0.0).sqrt()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{extract_mel, RateConfig};
    use std::f64::consts::PI;

    /// Frequency of the strongest bin of the frame-averaged power spectrum.
    fn dominant_bin(w: &Waveform, fft: usize, hop: usize) -> usize {
        let x: Vec<f64> = w.samples.iter().map(|&s| s as f64).collect();
        let spec = StftEngine::new(fft, hop).stft(&x);
        let mut acc = vec![0.0; spec.bins];
        for m in 0..spec.frames {
            for (a, c) in acc.iter_mut().zip(spec.frame(m)) {
                *a += c.norm_sqr();
            }
        }
        acc.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
    }

    #[test]
    fn floor_input_gives_silence() {
        let cfg = RateConfig::standard(16_000).unwrap();
        let m = MelSpectrogram::new(vec![LOG_FLOOR; 101 * 64], 101, cfg).unwrap();
        let w = griffin_lim(&m, 4).unwrap();
        assert!(w.rms() < 1e-3);
        assert_eq!(w.len(), 16_000);
    }

    #[test]
    fn tone_survives_round_trip() {
        let cfg = RateConfig::standard(16_000).unwrap();
        let x: Vec<f32> = (0..16_000).map(|i| (0.5 * (2.0 * PI * 440.0 * i as f64 / 16_000.0).sin()) as f32).collect();
        let w = Waveform::new(x, 16_000).unwrap();
        let mel = extract_mel(&w, &cfg).unwrap();
        let y = griffin_lim(&mel, DEFAULT_GL_ITERS).unwrap();
        let expected = (440.0 / (16_000.0 / 1024.0) as f64).round() as i64;
        let got = dominant_bin(&y, 1024, 160) as i64;
        assert!((got - expected).abs() <= 1, "peak bin {got}, expected {expected}");
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = RateConfig::standard(16_000).unwrap();
        let mut m = MelSpectrogram::new(vec![0.0; 5 * 64], 5, cfg).unwrap();
        assert!(griffin_lim(&m, 0).is_err());
        m.values[3] = f32::NAN;
        assert!(griffin_lim(&m, 1).is_err());
    }
}
