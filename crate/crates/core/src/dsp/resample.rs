//! Band-limited resampling by direct windowed-sinc interpolation.

use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

/// Half-width of the interpolation kernel, in zero crossings of the
/// low-pass sinc.
const ZERO_CROSSINGS: f64 = 48.0;
/// Cutoff as a fraction of the lower of the two Nyquist frequencies.
const ROLLOFF: f64 = 0.9;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window on `u ∈ [-1, 1]`.
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        0.42 + 0.5 * (PI * u).cos() + 0.08 * (2.0 * PI * u).cos()
    }
}

/// Resamples `w` to `target_hz`. The output has
/// `round(len · target_hz / rate_hz)` samples and is low-passed below the
/// lower of the two Nyquist frequencies.
pub fn resample(w: &Waveform, target_hz: u32) -> Result<Waveform> {
    if target_hz == 0 || w.rate_hz == 0 {
        return Err(Error::invalid("sampling rates must be positive"));
    }
    if w.is_empty() {
        return Err(Error::invalid("cannot resample an empty waveform"));
    }
    if target_hz == w.rate_hz {
        return Ok(w.clone());
    }
    let src = w.rate_hz as u128;
    let dst = target_hz as u128;
    let out_len = ((w.len() as u128 * dst * 2 + src) / (src * 2)) as usize;

    let step = w.rate_hz as f64 / target_hz as f64;
    // Cutoff in cycles per input sample.
    let cutoff = 0.5 * ROLLOFF * (target_hz as f64 / w.rate_hz as f64).min(1.0);
    let half_width = ZERO_CROSSINGS / (2.0 * cutoff);
    let x = &w.samples;
    let n_in = x.len() as i64;

    let samples = (0..out_len)
        .map(|n| {
            let t = n as f64 * step;
            let lo = ((t - half_width).ceil() as i64).max(0);
            let hi = ((t + half_width).floor() as i64).min(n_in - 1);
            let mut acc = 0.0f64;
            for k in lo..=hi {
                let d = t - k as f64;
                let h = 2.0 * cutoff * sinc(2.0 * cutoff * d) * blackman(d / half_width);
                acc += x[k as usize] as f64 * h;
            }
            acc as f32
        })
        .collect();
    Waveform::new(samples, target_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin() as f32 * 0.5)
            .collect();
        Waveform::new(s, rate).unwrap()
    }

    fn power(w: &Waveform) -> f64 {
        w.samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / w.len() as f64
    }

    #[test]
    fn length_follows_rate_ratio() {
        let w = Waveform::new(vec![0.0; 48_000], 48_000).unwrap();
        assert_eq!(resample(&w, 16_000).unwrap().len(), 16_000);
        let w = Waveform::new(vec![0.0; 1001], 16_000).unwrap();
        // 1001 * 3 / 2 = 1501.5 rounds to 1502
        assert_eq!(resample(&w, 24_000).unwrap().len(), 1502);
    }

    #[test]
    fn identical_rates_are_identity() {
        let w = tone(440.0, 16_000, 1000);
        assert_eq!(resample(&w, 16_000).unwrap(), w);
    }

    #[test]
    fn errors_on_bad_input() {
        let empty = Waveform { samples: vec![], rate_hz: 16_000 };
        assert!(resample(&empty, 8_000).is_err());
        let w = tone(440.0, 16_000, 100);
        assert!(resample(&w, 0).is_err());
    }

    #[test]
    fn passband_tone_keeps_its_power() {
        let w = tone(1000.0, 48_000, 48_000);
        let r = resample(&w, 16_000).unwrap();
        // ignore kernel edge effects
        let mid = Waveform::new(r.samples[1000..15_000].to_vec(), 16_000).unwrap();
        let ratio = power(&mid) / power(&w);
        assert!((ratio - 1.0).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn tone_above_target_nyquist_is_removed() {
        let w = tone(10_000.0, 48_000, 48_000);
        let r = resample(&w, 16_000).unwrap();
        assert!(power(&r) < 0.01 * power(&w));
    }

    #[test]
    fn upsampling_preserves_low_tone() {
        let w = tone(300.0, 16_000, 16_000);
        let r = resample(&w, 48_000).unwrap();
        assert_eq!(r.len(), 48_000);
        for i in (3000..45_000).step_by(997) {
            let expect = (2.0 * PI * 300.0 * i as f64 / 48_000.0).sin() * 0.5;
            assert!((r.samples[i] as f64 - expect).abs() < 1e-3);
        }
    }
}
