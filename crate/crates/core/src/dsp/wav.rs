//! Mono 16-bit PCM WAV I/O.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

const I16_SCALE: f32 = 32767.0;

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.rate_hz,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut writer = WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample(quantize(s))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(Error::format(
            path,
            format!(
                "expected mono 16-bit PCM, got {} ch / {} bit / {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / I16_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// The sample rate stored in a WAV header.
pub fn wav_rate(path: impl AsRef<Path>) -> Result<u32> {
    Ok(WavReader::open(path.as_ref())?.spec().sample_rate)
}

fn quantize(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * I16_SCALE).round() as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_preserves_quantized_samples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 1.0, -1.0, 0.25], 24_000).unwrap();
        write_wav(&p, &w).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.rate_hz, 24_000);
        assert_eq!(wav_rate(&p).unwrap(), 24_000);
        for (a, b) in w.samples.iter().zip(&r.samples) {
            assert!((a - b).abs() <= 0.5 / I16_SCALE);
        }
    }

    #[test]
    fn out_of_range_samples_are_clipped() {
        assert_eq!(quantize(3.0), 32767);
        assert_eq!(quantize(-3.0), -32767);
    }
}
