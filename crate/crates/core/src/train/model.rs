use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::codec::Codec;
use crate::conditioning::{ConditionBatch, Conditioner, RateEmbedding, COND_DIM};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Init, ParamStore, TrainLog};
use crate::unet::UNet;

pub const LDM_PREFIX: &str = "ldm.";
pub const CODEC_PREFIX: &str = "codec.";
const RATE_TABLE: &str = "cond.rate_table";

/// Conditioner plus noise-prediction U-Net sharing one parameter store.
pub struct LdmModel {
    pub config: ExperimentConfig,
    pub conditioner: Conditioner,
    pub unet: UNet,
    pub schedule: NoiseSchedule,
    ps: ParamStore,
}

impl LdmModel {
    pub fn new(config: ExperimentConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        if config.unet.cond_dim != COND_DIM {
            return Err(Error::Config(format!(
                "unet.cond_dim {} must equal the condition width {COND_DIM}",
                config.unet.cond_dim
            )));
        }
        let mut ps = ParamStore::new(dtype, config.seed);
        let conditioner = Conditioner::new(&mut ps, config.rates()?, COND_DIM)?;
        let unet = UNet::new(&mut ps, "unet", config.unet.clone())?;
        let schedule = config.schedule.build()?;
        Ok(Self {
            config,
            conditioner,
            unet,
            schedule,
            ps,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    /// Latent shape `(C, t, f)` of one generated clip.
    pub fn latent_shape(&self, codec: &Codec) -> Vec<usize> {
        vec![
            codec.config.latent_channels,
            crate::codec::latent_frames(self.config.clip_frames),
            codec.config.mel_dim / crate::codec::DOWNSAMPLE,
        ]
    }

    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        Ok(self
            .ps
            .snapshot(DType::F32)?
            .into_iter()
            .map(|(k, v)| (format!("{LDM_PREFIX}{k}"), v))
            .collect())
    }

    /// Loads every parameter from `tensors` (keys without prefix).
    pub fn load_exact(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let missing = self.ps.load(tensors, "")?;
        if !missing.is_empty() {
            return Err(Error::Config(format!("checkpoint lacks parameters: {}", missing.join(", "))));
        }
        Ok(())
    }

    /// Copies every parameter of a parent model except the rate table, whose
    /// rows are matched by rate; rows for rates the parent never saw keep
    /// their fresh initialization.
    pub fn warm_start(&self, parent: &BTreeMap<String, Tensor>, parent_rates: &[u32]) -> Result<Vec<u32>> {
        let mut shared = parent.clone();
        let parent_table = shared
            .remove(RATE_TABLE)
            .ok_or_else(|| Error::Config("parent checkpoint has no rate table".into()))?;
        let missing = self.ps.load(&shared, "")?;
        if missing.iter().any(|m| m != RATE_TABLE) {
            return Err(Error::Config(format!("parent checkpoint lacks parameters: {}", missing.join(", "))));
        }
        if parent_table.dim(0)? != parent_rates.len() {
            return Err(Error::shape("parent rate table does not match its rate list"));
        }
        let var = self.ps.var(RATE_TABLE)?;
        let ours = self.conditioner.rate.rates().rates();
        let mut rows: Vec<Tensor> = (0..ours.len()).map(|i| var.as_tensor().get(i)).collect::<candle_core::Result<_>>()?;
        let mut carried = Vec::new();
        for (i, r) in ours.iter().enumerate() {
            if let Some(j) = parent_rates.iter().position(|p| p == r) {
                rows[i] = parent_table.get(j)?.to_dtype(self.dtype())?;
                carried.push(*r);
            }
        }
        var.set(&Tensor::stack(&rows, 0)?)?;
        Ok(carried)
    }

    /// Re-draws the rate table from `seed`.
    pub fn reinit_rate_table(&self, seed: u64) -> Result<()> {
        self.ps.reinit(&format!("cond.{}", RateEmbedding::PARAM), Init::Normal(1.0), seed)
    }
}

impl Denoiser for LdmModel {
    fn predict(&self, x_t: &Tensor, ts: &[usize], cond: &ConditionBatch) -> Result<Tensor> {
        self.unet.forward(x_t, ts, cond)
    }
}

/// Metadata stored alongside an LDM checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub codec: serde_json::Value,
    pub step: usize,
    pub best_valid: Option<f64>,
    pub best_step: usize,
    pub log: TrainLog,
    pub parent_sha256: Option<String>,
    pub rate_set: Vec<u32>,
    pub seed: u64,
}

pub const LDM_KIND: &str = "ldm";

impl CheckpointMeta {
    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let meta: Self = serde_json::from_value(ck.meta.clone()).map_err(|e| Error::format(path, e.to_string()))?;
        if meta.kind != LDM_KIND {
            return Err(Error::format(path, format!("expected an {LDM_KIND} checkpoint, found {}", meta.kind)));
        }
        Ok(meta)
    }
}

/// A trained codec and LDM, ready to generate.
pub struct Pipeline {
    pub model: LdmModel,
    pub codec: Codec,
    pub meta: CheckpointMeta,
}

impl Pipeline {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let meta = CheckpointMeta::from_checkpoint(&ck, path)?;
        let codec = Codec::restore(&meta.codec, &ck.tensors, CODEC_PREFIX, DType::F32)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let model = LdmModel::new(meta.config.clone(), DType::F32)?;
        model
            .load_exact(&ck.with_prefix(LDM_PREFIX))
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self { model, codec, meta })
    }
}
