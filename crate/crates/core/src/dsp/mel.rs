//! HTK-scale triangular filterbanks, log-mel extraction and the `SRCM`
//! binary container for mel spectrograms.
//!
//! Container layout (all little-endian):
//!
//! | offset | type      | field                      |
//! |--------|-----------|----------------------------|
//! | 0      | [u8; 4]   | magic `b"SRCM"`            |
//! | 4      | u32       | version (1)                |
//! | 8      | u32       | rate_hz                    |
//! | 12     | u32       | fft_size                   |
//! | 16     | u32       | hop_size                   |
//! | 20     | u32       | mel_dim                    |
//! | 24     | u32       | frames                     |
//! | 28     | f32 × n   | values, row-major frames × mel_dim |

use std::path::Path;

use super::stft::{num_frames, StftEngine};
use super::{RateConfig, Waveform};
use crate::error::{Error, Result};

/// Floor applied to mel power before taking the log.
pub const MEL_POWER_FLOOR: f64 = 1e-5;
/// `ln(MEL_POWER_FLOOR)`: the value every silent mel cell takes.
pub const LOG_FLOOR: f32 = -11.512_925;

const MAGIC: &[u8; 4] = b"SRCM";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters, `mel_dim × n_bins`, row-major.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub mel_dim: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

/// Builds peak-normalized triangular filters whose edges are evenly spaced
/// on the HTK mel scale between 0 Hz and Nyquist.
pub fn mel_filterbank(cfg: &RateConfig) -> Result<MelFilterbank> {
    let n_bins = cfg.n_bins();
    if cfg.mel_dim > n_bins {
        return Err(Error::invalid(format!(
            "mel_dim {} exceeds the {} FFT bins of fft_size {}",
            cfg.mel_dim, n_bins, cfg.fft_size
        )));
    }
    let top = hz_to_mel(cfg.nyquist_hz());
    let edges: Vec<f64> = (0..cfg.mel_dim + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.mel_dim + 1) as f64))
        .collect();
    let bin_hz = cfg.rate_hz as f64 / cfg.fft_size as f64;
    let mut weights = vec![0.0; cfg.mel_dim * n_bins];
    for m in 0..cfg.mel_dim {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            weights[m * n_bins + k] = up.min(down).max(0.0);
        }
    }
    Ok(MelFilterbank {
        mel_dim: cfg.mel_dim,
        n_bins,
        weights,
        centers_hz: edges[1..=cfg.mel_dim].to_vec(),
    })
}

/// Log-mel energies, `frames × mel_dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f32>,
    pub frames: usize,
    pub config: RateConfig,
}

impl MelSpectrogram {
    pub fn new(values: Vec<f32>, frames: usize, config: RateConfig) -> Result<Self> {
        if values.len() != frames * config.mel_dim {
            return Err(Error::shape(format!(
                "mel values {} != {frames} frames x {} bands",
                values.len(),
                config.mel_dim
            )));
        }
        Ok(Self { values, frames, config })
    }

    pub fn mel_dim(&self) -> usize {
        self.config.mel_dim
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        let d = self.mel_dim();
        &self.values[frame * d..(frame + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, c.rate_hz, c.fft_size as u32, c.hop_size as u32, c.mel_dim as u32, self.frames as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::format(origin, "missing SRCM header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let (rate, fft, hop, mel, frames) = (word(1), word(2) as usize, word(3) as usize, word(4) as usize, word(5) as usize);
        let expected = HEADER_LEN + 4 * frames * mel;
        if bytes.len() != expected {
            return Err(Error::format(origin, format!("payload is {} bytes, expected {expected}", bytes.len())));
        }
        let rate_id = RateConfig::standard(rate)
            .ok()
            .filter(|s| s.fft_size == fft && s.hop_size == hop && s.mel_dim == mel)
            .map_or(0, |s| s.rate_id);
        let config = RateConfig::new(rate, fft, hop, mel, rate_id).map_err(|e| Error::format(origin, e.to_string()))?;
        let values = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(values, frames, config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Center-padded Hann STFT → power normalized by the squared window sum →
/// mel filterbank → `ln(max(power, MEL_POWER_FLOOR))`.
pub fn extract_mel(w: &Waveform, cfg: &RateConfig) -> Result<MelSpectrogram> {
    if w.rate_hz != cfg.rate_hz {
        return Err(Error::invalid(format!(
            "waveform is {} Hz but config expects {} Hz",
            w.rate_hz, cfg.rate_hz
        )));
    }
    let fb = mel_filterbank(cfg)?;
    let engine = StftEngine::new(cfg.fft_size, cfg.hop_size);
    let x: Vec<f64> = w.samples.iter().map(|&s| s as f64).collect();
    let spec = engine.stft(&x);
    debug_assert_eq!(spec.frames, num_frames(w.len(), cfg.hop_size));
    let norm = power_norm(cfg.fft_size);
    let mut values = Vec::with_capacity(spec.frames * cfg.mel_dim);
    for m in 0..spec.frames {
        let power: Vec<f64> = spec.frame(m).iter().map(|c| c.norm_sqr() * norm).collect();
        for b in 0..cfg.mel_dim {
            let e: f64 = fb.row(b).iter().zip(&power).map(|(w, p)| w * p).sum();
            values.push(e.max(MEL_POWER_FLOOR).ln() as f32);
        }
    }
    MelSpectrogram::new(values, spec.frames, *cfg)
}

/// `1 / (Σ window)²`, so a unit-amplitude sinusoid has bin power ≈ 1/4
/// regardless of FFT size.
pub(crate) fn power_norm(fft_size: usize) -> f64 {
    let s: f64 = super::stft::hann(fft_size).iter().sum();
    1.0 / (s * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::STANDARD_RATES;

    #[test]
    fn filterbank_shape_and_rows() {
        let cfg = RateConfig::standard(16_000).unwrap();
        let fb = mel_filterbank(&cfg).unwrap();
        assert_eq!((fb.mel_dim, fb.n_bins), (64, 513));
        assert_eq!(fb.weights.len(), 64 * 513);
        for m in 0..64 {
            assert!(fb.row(m).iter().all(|&w| w >= 0.0));
            assert!(fb.row(m).iter().sum::<f64>() > 0.0, "row {m} is empty");
        }
    }

    #[test]
    fn filterbank_centers_strictly_increase() {
        for &r in &STANDARD_RATES {
            let cfg = RateConfig::standard(r).unwrap();
            let fb = mel_filterbank(&cfg).unwrap();
            // independent recomputation of the centers
            let top = 2595.0 * (1.0 + cfg.nyquist_hz() / 700.0).log10();
            for (m, &c) in fb.centers_hz.iter().enumerate() {
                let mel = top * (m + 1) as f64 / 65.0;
                let hz = 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
                assert!((hz - c).abs() < 1e-6);
            }
            assert!(fb.centers_hz.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn every_bin_between_first_and_last_center_is_covered() {
        for &r in &STANDARD_RATES {
            let cfg = RateConfig::standard(r).unwrap();
            let fb = mel_filterbank(&cfg).unwrap();
            let bin_hz = r as f64 / cfg.fft_size as f64;
            for k in 0..fb.n_bins {
                let f = k as f64 * bin_hz;
                if f < fb.centers_hz[0] || f > fb.centers_hz[63] {
                    continue;
                }
                assert!((0..64).any(|m| fb.row(m)[k] > 0.0), "bin {k} uncovered at {r}");
            }
        }
    }

    #[test]
    fn too_many_bands_is_an_error() {
        let cfg = RateConfig::new(16_000, 160, 160, 100, 0).unwrap();
        assert!(mel_filterbank(&cfg).is_err());
    }

    #[test]
    fn silence_maps_to_log_floor() {
        let cfg = RateConfig::standard(24_000).unwrap();
        let w = Waveform::new(vec![0.0; 2400], 24_000).unwrap();
        let m = extract_mel(&w, &cfg).unwrap();
        assert_eq!(m.frames, 11);
        assert!(m.values.iter().all(|&v| v == LOG_FLOOR));
        assert_eq!(LOG_FLOOR, (MEL_POWER_FLOOR.ln()) as f32);
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let cfg = RateConfig::standard(16_000).unwrap();
        let w = Waveform::new(vec![0.0; 100], 48_000).unwrap();
        assert!(extract_mel(&w, &cfg).is_err());
    }

    #[test]
    fn one_second_gives_101_frames_at_every_rate() {
        for &r in &STANDARD_RATES {
            let cfg = RateConfig::standard(r).unwrap();
            let w = Waveform::new(vec![0.01; r as usize], r).unwrap();
            assert_eq!(extract_mel(&w, &cfg).unwrap().frames, 101);
        }
    }

    #[test]
    fn srcm_round_trip_and_header() {
        let cfg = RateConfig::standard(32_000).unwrap();
        let m = MelSpectrogram::new((0..3 * 64).map(|i| i as f32 * 0.5).collect(), 3, cfg).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"SRCM");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 32_000);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), 0.5);
        let back = MelSpectrogram::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert!(MelSpectrogram::from_bytes(&bytes[..40], Path::new("mem")).is_err());
    }
}
