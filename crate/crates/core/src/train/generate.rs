use std::path::Path;

use rayon::prelude::*;

use super::model::Pipeline;
use crate::codec::Latent;
use crate::conditioning::Condition;
use crate::diffusion::{ddim_sample_batch, SamplerConfig};
use crate::dsp::wav::write_wav;
use crate::dsp::{griffin_lim_with, GriffinLimOptions, MelSpectrogram, RateConfig, Waveform};
use crate::error::{Error, Result};
use crate::rng::deterministic_mode;

/// One clip to generate.
#[derive(Clone, Debug, PartialEq)]
pub struct GenRequest {
    pub prompt: String,
    pub rate_hz: u32,
    pub seed: u64,
}

impl Pipeline {
    /// Mel spectrograms for a batch of requests, sampled jointly.
    pub fn sample_mels(&self, requests: &[GenRequest], sampler: &SamplerConfig) -> Result<Vec<MelSpectrogram>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let m = &self.model;
        let mut conds: Vec<Condition> = Vec::with_capacity(requests.len());
        let mut nulls: Vec<Condition> = Vec::with_capacity(requests.len());
        for r in requests {
            conds.push(m.conditioner.condition(&r.prompt, r.rate_hz)?);
            nulls.push(m.conditioner.null_condition(r.rate_hz)?);
        }
        let cond_refs: Vec<&Condition> = conds.iter().collect();
        let null_refs: Vec<&Condition> = nulls.iter().collect();
        let seeds: Vec<u64> = requests.iter().map(|r| r.seed).collect();
        let shape = m.latent_shape(&self.codec);
        let z = ddim_sample_batch(m, &cond_refs, Some(&null_refs), &m.schedule, sampler, &shape, &seeds)?;
        let frames = m.config.clip_frames;
        requests
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let latent = Latent::from_scaled(z.get(i)?, self.codec.scale_factor, RateConfig::standard(r.rate_hz)?, frames)?;
                self.codec.decode(&latent)
            })
            .collect()
    }

    /// Waveforms for a batch of requests; each is inverted with Griffin-Lim
    /// at its own rate's analysis config and seeded by its request seed.
    pub fn generate_batch(&self, requests: &[GenRequest], sampler: &SamplerConfig) -> Result<Vec<Waveform>> {
        let mels = self.sample_mels(requests, sampler)?;
        let invert = |(m, r): (&MelSpectrogram, &GenRequest)| {
            griffin_lim_with(
                m,
                &GriffinLimOptions {
                    seed: r.seed,
                    ..Default::default()
                },
            )
        };
        if deterministic_mode() {
            mels.iter().zip(requests).map(invert).collect()
        } else {
            mels.par_iter().zip(requests.par_iter()).map(invert).collect()
        }
    }

    pub fn generate(&self, prompt: &str, rate_hz: u32, sampler: &SamplerConfig) -> Result<Waveform> {
        let req = GenRequest {
            prompt: prompt.to_string(),
            rate_hz,
            seed: sampler.seed,
        };
        let mut out = self.generate_batch(&[req], sampler)?;
        Ok(out.remove(0))
    }
}

/// Loads `checkpoint`, generates one clip and writes it as a WAV at `rate_hz`.
pub fn generate(checkpoint: &Path, prompt: &str, rate_hz: u32, sampler: &SamplerConfig, out: &Path) -> Result<Waveform> {
    let pipeline = Pipeline::load(checkpoint)?;
    if !pipeline.model.config.rate_set.contains(&rate_hz) {
        return Err(Error::UnknownRate {
            rate_hz,
            valid: pipeline.model.config.rate_set.clone(),
        });
    }
    let w = pipeline.generate(prompt, rate_hz, sampler)?;
    write_wav(out, &w)?;
    Ok(w)
}
