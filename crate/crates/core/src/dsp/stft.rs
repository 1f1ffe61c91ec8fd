//! Center-padded short-time Fourier transform and its overlap-add inverse.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Frames produced by a center-padded STFT of `n_samples` samples.
pub fn num_frames(n_samples: usize, hop: usize) -> usize {
    n_samples / hop + 1
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Maps an index of the reflect-padded signal back into `0..n`.
fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// One-sided complex spectrogram, `frames × bins`, row-major.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn frame(&self, m: usize) -> &[Complex<f64>] {
        &self.data[m * self.bins..(m + 1) * self.bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Planned forward/inverse FFTs and window for one `(fft_size, hop)` pair.
pub(crate) struct StftEngine {
    fft_size: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftEngine {
    pub fn new(fft_size: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fft_size,
            hop,
            window: hann(fft_size),
            forward: planner.plan_fft_forward(fft_size),
            inverse: planner.plan_fft_inverse(fft_size),
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn stft(&self, x: &[f64]) -> Spectrogram {
        let n = x.len();
        let frames = num_frames(n, self.hop);
        let bins = self.bins();
        let pad = (self.fft_size / 2) as i64;
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        for m in 0..frames {
            let start = (m * self.hop) as i64 - pad;
            for (j, b) in buf.iter_mut().enumerate() {
                let v = if n == 0 { 0.0 } else { x[reflect(start + j as i64, n)] };
                *b = Complex::new(v * self.window[j], 0.0);
            }
            self.forward.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
        Spectrogram { frames, bins, data }
    }

    /// Windowed overlap-add inverse with squared-window normalization.
    /// Output length is `hop · (frames − 1)` unless `length` is given.
    pub fn istft(&self, spec: &Spectrogram, length: Option<usize>) -> Vec<f64> {
        let n_fft = self.fft_size;
        let pad = n_fft / 2;
        let total = n_fft + self.hop * spec.frames.saturating_sub(1);
        let mut out = vec![0.0f64; total];
        let mut wsum = vec![0.0f64; total];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let scale = 1.0 / n_fft as f64;
        for m in 0..spec.frames {
            let frame = spec.frame(m);
            buf[..spec.bins].copy_from_slice(frame);
            for k in spec.bins..n_fft {
                buf[k] = frame[n_fft - k].conj();
            }
            buf[0].im = 0.0;
            if n_fft % 2 == 0 {
                buf[n_fft / 2].im = 0.0;
            }
            self.inverse.process(&mut buf);
            let off = m * self.hop;
            for j in 0..n_fft {
                let w = self.window[j];
                out[off + j] += buf[j].re * scale * w;
                wsum[off + j] += w * w;
            }
        }
        let len = length.unwrap_or(self.hop * spec.frames.saturating_sub(1));
        (0..len)
            .map(|i| {
                let j = i + pad;
                if j < total && wsum[j] > 1e-10 {
                    out[j] / wsum[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

pub fn stft(x: &[f32], fft_size: usize, hop: usize) -> Spectrogram {
    let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    StftEngine::new(fft_size, hop).stft(&xd)
}

pub fn istft(spec: &Spectrogram, fft_size: usize, hop: usize, length: Option<usize>) -> Vec<f32> {
    StftEngine::new(fft_size, hop)
        .istft(spec, length)
        .into_iter()
        .map(|v| v as f32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indexing() {
        let n = 5;
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, n)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn frame_count_matches_center_padding() {
        let x = vec![0.1f32; 16_000];
        assert_eq!(stft(&x, 1024, 160).frames, 101);
        assert_eq!(num_frames(160_000, 160), 1001);
    }

    #[test]
    fn stft_istft_round_trip() {
        let x: Vec<f32> = (0..4000).map(|i| ((i as f32) * 0.07).sin() * 0.3 + ((i * 13 % 17) as f32 - 8.0) * 0.01).collect();
        let spec = stft(&x, 512, 128);
        let y = istft(&spec, 512, 128, Some(x.len()));
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
