//! Signal front end: waveforms, per-rate analysis configs, resampling,
//! log-mel extraction and Griffin-Lim inversion.

mod griffin_lim;
mod mel;
mod resample;
mod stft;
pub mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use griffin_lim::{griffin_lim, griffin_lim_with, GriffinLimOptions, DEFAULT_GL_ITERS};
pub use mel::{extract_mel, hz_to_mel, mel_filterbank, mel_to_hz, MelFilterbank, MelSpectrogram, LOG_FLOOR, MEL_POWER_FLOOR};
pub use resample::resample;
pub use stft::{istft, num_frames, stft, Spectrogram};

/// The four analysis configurations of the reference system, as
/// `(rate_hz, fft_size, hop_size, mel_dim)`.
pub const STANDARD_CONFIGS: [(u32, usize, usize, usize); 4] = [
    (16_000, 1024, 160, 64),
    (24_000, 2048, 240, 64),
    (32_000, 2048, 320, 64),
    (48_000, 2048, 480, 64),
];

pub const STANDARD_RATES: [u32; 4] = [16_000, 24_000, 32_000, 48_000];

/// Analysis frame rate shared by every config (hop / rate = 10 ms).
pub const FRAMES_PER_SECOND: u32 = 100;

/// DSP parameters for one sampling rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RateConfig {
    pub rate_hz: u32,
    pub fft_size: usize,
    pub hop_size: usize,
    pub mel_dim: usize,
    /// Index of this rate in the ordered rate set it belongs to.
    pub rate_id: usize,
}

impl RateConfig {
    pub fn new(rate_hz: u32, fft_size: usize, hop_size: usize, mel_dim: usize, rate_id: usize) -> Result<Self> {
        if rate_hz == 0 {
            return Err(Error::invalid("rate_hz must be positive"));
        }
        if hop_size * FRAMES_PER_SECOND as usize != rate_hz as usize {
            return Err(Error::invalid(format!(
                "hop_size {hop_size} at {rate_hz} Hz is not a 10 ms hop"
            )));
        }
        if fft_size < hop_size {
            return Err(Error::invalid(format!("fft_size {fft_size} < hop_size {hop_size}")));
        }
        if mel_dim == 0 {
            return Err(Error::invalid("mel_dim must be >= 1"));
        }
        Ok(Self {
            rate_hz,
            fft_size,
            hop_size,
            mel_dim,
            rate_id,
        })
    }

    /// The standard config for `rate_hz`, with `rate_id` its position among
    /// the standard rates.
    pub fn standard(rate_hz: u32) -> Result<Self> {
        STANDARD_CONFIGS
            .iter()
            .enumerate()
            .find(|(_, c)| c.0 == rate_hz)
            .map(|(id, &(r, f, h, m))| Self::new(r, f, h, m, id))
            .unwrap_or_else(|| {
                Err(Error::UnknownRate {
                    rate_hz,
                    valid: STANDARD_RATES.to_vec(),
                })
            })
    }

    pub fn nyquist_hz(&self) -> f64 {
        self.rate_hz as f64 / 2.0
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// An ordered, closed set of sampling rates. `rate_id`s are positions in
/// ascending rate order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateSet {
    configs: Vec<RateConfig>,
}

impl RateSet {
    pub fn new(rates: &[u32]) -> Result<Self> {
        let mut sorted = rates.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() {
            return Err(Error::invalid("rate set is empty"));
        }
        let configs = sorted
            .iter()
            .enumerate()
            .map(|(id, &r)| {
                let std = RateConfig::standard(r)?;
                Ok(RateConfig { rate_id: id, ..std })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { configs })
    }

    pub fn standard() -> Self {
        Self::new(&STANDARD_RATES).expect("standard rates are valid")
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn rates(&self) -> Vec<u32> {
        self.configs.iter().map(|c| c.rate_hz).collect()
    }

    pub fn configs(&self) -> &[RateConfig] {
        &self.configs
    }

    pub fn contains(&self, rate_hz: u32) -> bool {
        self.configs.iter().any(|c| c.rate_hz == rate_hz)
    }

    pub fn config(&self, rate_hz: u32) -> Result<RateConfig> {
        self.configs
            .iter()
            .find(|c| c.rate_hz == rate_hz)
            .copied()
            .ok_or_else(|| Error::UnknownRate {
                rate_hz,
                valid: self.rates(),
            })
    }
}

/// Mono audio at a fixed sampling rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, rate_hz: u32) -> Result<Self> {
        if rate_hz == 0 {
            return Err(Error::invalid("rate_hz must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self { samples, rate_hz })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let e: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (e / self.samples.len() as f64).sqrt()
    }

    /// Scales so the absolute peak equals `target`. Silent input is left as is.
    pub fn peak_normalize(&mut self, target: f32) {
        let peak = self.peak();
        if peak > 0.0 {
            let g = target / peak;
            self.samples.iter_mut().for_each(|s| *s *= g);
        }
    }

    pub fn clip(&mut self) {
        self.samples.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_configs_have_ten_ms_hops() {
        for &(r, f, h, m) in &STANDARD_CONFIGS {
            let c = RateConfig::new(r, f, h, m, 0).unwrap();
            assert_eq!(c.hop_size as f64 / c.rate_hz as f64, 0.01);
        }
    }

    #[test]
    fn custom_config_rejects_non_10ms_hop() {
        assert!(RateConfig::new(16_000, 1024, 256, 64, 0).is_err());
        assert!(RateConfig::new(16_000, 128, 160, 64, 0).is_err());
        assert!(RateConfig::new(16_000, 1024, 160, 0, 0).is_err());
    }

    #[test]
    fn rate_set_orders_and_indexes() {
        let set = RateSet::new(&[48_000, 16_000, 32_000, 24_000]).unwrap();
        assert_eq!(set.rates(), vec![16_000, 24_000, 32_000, 48_000]);
        assert_eq!(set.config(16_000).unwrap().rate_id, 0);
        assert_eq!(set.config(48_000).unwrap().rate_id, 3);
        match set.config(44_100) {
            Err(Error::UnknownRate { valid, .. }) => assert_eq!(valid.len(), 4),
            other => panic!("expected UnknownRate, got {other:?}"),
        }
    }

    #[test]
    fn waveform_rejects_nan() {
        assert!(Waveform::new(vec![0.0, f32::NAN], 16_000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }
}
