use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{build_schedule, NoiseSchedule, SamplerConfig};
use crate::dsp::{RateSet, STANDARD_RATES};
use crate::error::{Error, Result};
use crate::nn::sha256_hex;
use crate::unet::UNetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FixedRate,
    MultiRate,
    PretrainThenFinetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.num_steps, self.beta_start, self.beta_end)
    }
}

/// Everything that determines a training run. Stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: TrainMode,
    /// Rates the model is conditioned on (the finetune set in
    /// `pretrain_then_finetune`).
    pub rate_set: Vec<u32>,
    pub pretrain_rate_hz: Option<u32>,
    pub epochs: usize,
    /// Optional cap on optimizer steps, applied after `epochs`.
    pub max_steps: Option<usize>,
    pub pretrain_epochs: usize,
    pub pretrain_max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub cond_dropout_prob: f64,
    pub eval_every: usize,
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    /// Mel frames per generated clip.
    pub clip_frames: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::MultiRate,
            rate_set: STANDARD_RATES.to_vec(),
            pretrain_rate_hz: None,
            epochs: 40,
            max_steps: None,
            pretrain_epochs: 40,
            pretrain_max_steps: None,
            batch_size: 8,
            lr: 1e-4,
            clip_norm: Some(1.0),
            seed: 0,
            cond_dropout_prob: 0.1,
            eval_every: 250,
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            clip_frames: 101,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let rates = RateSet::new(&self.rate_set)?;
        if rates.len() != self.rate_set.len() {
            return bad(format!("rate_set {:?} has duplicates", self.rate_set));
        }
        match (self.mode, self.pretrain_rate_hz) {
            (TrainMode::PretrainThenFinetune, None) => return bad("pretrain_then_finetune needs pretrain_rate_hz".into()),
            (TrainMode::PretrainThenFinetune, Some(r)) if !rates.contains(r) => {
                return bad(format!("pretrain rate {r} is not in rate_set {:?}", self.rate_set))
            }
            (TrainMode::FixedRate | TrainMode::MultiRate, Some(_)) => {
                return bad("pretrain_rate_hz is only valid in pretrain_then_finetune mode".into())
            }
            _ => {}
        }
        if self.mode == TrainMode::FixedRate && rates.len() != 1 {
            return bad(format!("fixed_rate mode needs exactly one rate, got {:?}", self.rate_set));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_prob) {
            return bad(format!("cond_dropout_prob {} not in [0, 1)", self.cond_dropout_prob));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.clip_frames == 0 {
            return bad("batch_size, eval_every and clip_frames must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return bad("epochs must be positive".into());
        }
        self.unet.validate()?;
        let s = self.schedule.build()?;
        self.sampler.validate(&s)?;
        Ok(())
    }

    pub fn rates(&self) -> Result<RateSet> {
        RateSet::new(&self.rate_set)
    }

    /// Optimizer steps for a dataset of `n` items.
    pub fn total_steps(&self, n: usize) -> usize {
        steps_for(n, self.batch_size, self.epochs, self.max_steps)
    }

    /// The phase-1 config of a pretrain run: fixed rate at `pretrain_rate_hz`.
    pub fn pretrain_phase(&self) -> Result<Self> {
        let rate = self
            .pretrain_rate_hz
            .ok_or_else(|| Error::Config("pretrain_rate_hz is not set".into()))?;
        Ok(Self {
            mode: TrainMode::FixedRate,
            rate_set: vec![rate],
            pretrain_rate_hz: None,
            epochs: self.pretrain_epochs,
            max_steps: self.pretrain_max_steps,
            ..self.clone()
        })
    }

    /// The phase-2 config of a pretrain run: multi-rate over `rate_set`.
    pub fn finetune_phase(&self) -> Self {
        Self {
            mode: TrainMode::MultiRate,
            pretrain_rate_hz: None,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub(crate) fn steps_for(n: usize, batch: usize, epochs: usize, cap: Option<usize>) -> usize {
    let per_epoch = n.div_ceil(batch.max(1));
    let by_epochs = if epochs == 0 { usize::MAX } else { epochs * per_epoch };
    cap.map_or(by_epochs, |c| c.min(by_epochs))
}
