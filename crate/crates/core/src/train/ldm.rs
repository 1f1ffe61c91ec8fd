use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::Rng;

use super::model::{CheckpointMeta, LdmModel, CODEC_PREFIX, LDM_KIND, LDM_PREFIX};
use super::{ExperimentConfig, TrainMode};
use crate::codec::Codec;
use crate::conditioning::{Condition, ConditionBatch};
use crate::dataset::{EventClass, MelItem};
use crate::diffusion::{batch_noise, forward_marginal_batch, training_loss};
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{file_sha256, scalar, Adam, AdamConfig, Checkpoint, TrainLog};
use crate::rng::{batch_indices, mix_seed, rng_for};

pub const BEST_FILE: &str = "best.safetensors";
pub const LAST_FILE: &str = "last.safetensors";

/// One training example with its scaled codec latent `(C, t, f)`.
#[derive(Clone, Debug)]
pub struct LatentItem {
    pub z: Tensor,
    pub caption: String,
    pub class: EventClass,
    pub rate_hz: u32,
}

/// Encodes mel items with `codec` into scaled posterior-mean latents.
pub fn encode_items(codec: &Codec, items: &[MelItem]) -> Result<Vec<LatentItem>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(32) {
        let mut start = 0;
        while start < chunk.len() {
            let frames = chunk[start].mel.frames;
            let end = start + chunk[start..].iter().take_while(|m| m.mel.frames == frames).count();
            let mels: Vec<&MelSpectrogram> = chunk[start..end].iter().map(|m| &m.mel).collect();
            let z = codec.latents(&mels)?.to_dtype(DType::F32)?;
            for (i, m) in chunk[start..end].iter().enumerate() {
                out.push(LatentItem {
                    z: z.get(i)?,
                    caption: m.caption.clone(),
                    class: m.class,
                    rate_hz: m.rate_hz,
                });
            }
            start = end;
        }
    }
    Ok(out)
}

/// How a run's parameters are initialized.
#[derive(Clone, Debug, PartialEq)]
pub enum Start {
    Fresh,
    /// Warm start from another run's checkpoint.
    From(PathBuf),
    /// Continue an interrupted run from its last checkpoint.
    Resume(PathBuf),
}

pub struct TrainOutcome {
    pub model: LdmModel,
    pub log: TrainLog,
    pub best_path: PathBuf,
    pub best_sha256: String,
    pub last_path: PathBuf,
}

/// Which items each step draws, and which of them get the null condition.
pub fn step_plan(cfg: &ExperimentConfig, n: usize, step: usize) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let b = cfg.batch_size.min(n);
    let idx = batch_indices(n, b, cfg.seed, step - 1);
    let mut rng = rng_for(&[cfg.seed, step as u64, 0x71]);
    let t_max = cfg.schedule.num_steps;
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=t_max)).collect();
    let drop: Vec<bool> = (0..b).map(|_| rng.random::<f64>() < cfg.cond_dropout_prob).collect();
    (idx, ts, drop)
}

/// Per-item conditions; dropped items get `c_∅` at their own rate.
pub fn batch_conditions(model: &LdmModel, items: &[&LatentItem], drop: &[bool]) -> Result<Vec<Condition>> {
    items
        .iter()
        .zip(drop)
        .map(|(it, &d)| {
            if d {
                model.conditioner.null_condition(it.rate_hz)
            } else {
                model.conditioner.condition(&it.caption, it.rate_hz)
            }
        })
        .collect()
}

fn check_rates(cfg: &ExperimentConfig, items: &[&LatentItem]) -> Result<()> {
    if let Some(bad) = items.iter().find(|it| !cfg.rate_set.contains(&it.rate_hz)) {
        return Err(Error::UnknownRate {
            rate_hz: bad.rate_hz,
            valid: cfg.rate_set.clone(),
        });
    }
    Ok(())
}

/// Loss of one training step without updating anything.
pub fn step_loss(model: &LdmModel, data: &[LatentItem], step: usize) -> Result<Tensor> {
    let cfg = &model.config;
    let (idx, ts, drop) = step_plan(cfg, data.len(), step);
    let items: Vec<&LatentItem> = idx.iter().map(|&i| &data[i]).collect();
    check_rates(cfg, &items)?;
    let z0 = Tensor::stack(&items.iter().map(|it| &it.z).collect::<Vec<_>>(), 0)?.to_dtype(model.dtype())?;
    let conds = batch_conditions(model, &items, &drop)?;
    let batch = ConditionBatch::new(&conds.iter().collect::<Vec<_>>())?;
    training_loss(model, &z0, &batch, &ts, &model.schedule, mix_seed(&[cfg.seed, step as u64, 0xE]))
}

/// Deterministic noise-prediction loss over `data`: every item is scored at
/// `draws` fixed timesteps with fixed noise and its full condition.
pub fn validation_loss(model: &LdmModel, data: &[LatentItem], draws: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let t_max = model.config.schedule.num_steps;
    let mut total = 0.0;
    let mut count = 0usize;
    for draw in 0..draws {
        for (ci, chunk) in data.chunks(32).enumerate() {
            let refs: Vec<&LatentItem> = chunk.iter().collect();
            check_rates(&model.config, &refs)?;
            let mut rng = rng_for(&[0x7A1, draw as u64, ci as u64]);
            let ts: Vec<usize> = (0..chunk.len()).map(|_| rng.random_range(1..=t_max)).collect();
            let z0 = Tensor::stack(&refs.iter().map(|it| &it.z).collect::<Vec<_>>(), 0)?.to_dtype(model.dtype())?;
            let noise = batch_noise(z0.dims(), mix_seed(&[0x7A1, draw as u64, ci as u64]), z0.dtype(), z0.device())?;
            let z_t = forward_marginal_batch(&z0, &ts, &model.schedule, &noise)?;
            let conds = batch_conditions(model, &refs, &vec![false; refs.len()])?;
            let batch = ConditionBatch::new(&conds.iter().collect::<Vec<_>>())?;
            let pred = model.unet.forward(&z_t, &ts, &batch)?;
            let per = (pred - noise)?.sqr()?.mean_all()?;
            total += scalar(&per)? * chunk.len() as f64;
            count += chunk.len();
        }
    }
    let v = total / count as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("validation loss {v}")));
    }
    Ok(v)
}

struct Saver<'a> {
    out: &'a Path,
    codec: &'a Codec,
    parent_sha256: Option<String>,
}

impl Saver<'_> {
    fn meta(&self, model: &LdmModel, log: &TrainLog, step: usize) -> Result<serde_json::Value> {
        let meta = CheckpointMeta {
            kind: LDM_KIND.into(),
            config: model.config.clone(),
            config_hash: model.config.config_hash(),
            codec: self.codec.meta(),
            step,
            best_valid: log.best_valid.is_finite().then_some(log.best_valid),
            best_step: log.best_step,
            log: log.clone(),
            parent_sha256: self.parent_sha256.clone(),
            rate_set: model.config.rate_set.clone(),
            seed: model.config.seed,
        };
        Ok(serde_json::to_value(meta)?)
    }

    fn save(&self, file: &str, model: &LdmModel, log: &TrainLog, step: usize, adam: Option<&Adam>) -> Result<String> {
        let mut tensors = model.tensors()?;
        tensors.extend(self.codec.tensors(CODEC_PREFIX)?);
        if let Some(a) = adam {
            tensors.extend(a.state_tensors());
        }
        Checkpoint::new(tensors, self.meta(model, log, step)?).save(&self.out.join(file))
    }
}

fn load_parent(path: &Path) -> Result<(Checkpoint, CheckpointMeta)> {
    let ck = Checkpoint::load(path)?;
    let meta = CheckpointMeta::from_checkpoint(&ck, path)?;
    Ok((ck, meta))
}

/// Trains the conditioner and U-Net on precomputed latents, writing
/// `best.safetensors` (best validation loss) and `last.safetensors`
/// (with optimizer state) under `out`. The returned model holds the best
/// parameters.
pub fn train_ldm(
    cfg: &ExperimentConfig,
    train: &[LatentItem],
    valid: &[LatentItem],
    codec: &Codec,
    start: &Start,
    out: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode == TrainMode::PretrainThenFinetune {
        return Err(Error::Config("train_ldm runs a single phase; use pretrain_then_finetune".into()));
    }
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    check_rates(cfg, &train.iter().collect::<Vec<_>>())?;
    let valid = if valid.is_empty() { train } else { valid };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let model = LdmModel::new(cfg.clone(), DType::F32)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        clip_norm: cfg.clip_norm,
        ..Default::default()
    });
    let mut log = TrainLog {
        best_valid: f64::INFINITY,
        ..Default::default()
    };
    let mut first_step = 1;
    let mut parent_sha256 = None;
    match start {
        Start::Fresh => {}
        Start::From(path) => {
            let (ck, meta) = load_parent(path)?;
            model.warm_start(&ck.with_prefix(LDM_PREFIX), &meta.rate_set)?;
            parent_sha256 = Some(file_sha256(path)?);
        }
        Start::Resume(path) => {
            let (ck, meta) = load_parent(path)?;
            model.load_exact(&ck.with_prefix(LDM_PREFIX))?;
            adam.load_state(&ck.tensors, meta.step, DType::F32)?;
            log = meta.log;
            if !log.best_valid.is_finite() {
                log.best_valid = f64::INFINITY;
            }
            first_step = meta.step + 1;
            parent_sha256 = meta.parent_sha256;
        }
    }
    let saver = Saver {
        out,
        codec,
        parent_sha256,
    };
    let best_path = out.join(BEST_FILE);
    let mut best = match start {
        Start::Resume(_) if best_path.exists() => Checkpoint::load(&best_path)?.with_prefix(LDM_PREFIX),
        _ => model.params().snapshot(DType::F32)?,
    };
    let mut best_sha256 = if best_path.exists() && matches!(start, Start::Resume(_)) {
        file_sha256(&best_path)?
    } else {
        String::new()
    };

    let total = cfg.total_steps(train.len());
    let validate = |model: &LdmModel, log: &mut TrainLog, step: usize| -> Result<bool> {
        let v = validation_loss(model, valid, 2)?;
        log.valid.push((step, v));
        let improved = v < log.best_valid;
        if improved {
            log.best_valid = v;
            log.best_step = step;
        }
        Ok(improved)
    };
    if first_step == 1 && validate(&model, &mut log, 0)? {
        best = model.params().snapshot(DType::F32)?;
        best_sha256 = saver.save(BEST_FILE, &model, &log, 0, None)?;
    }
    for step in first_step..=total {
        let loss = step_loss(&model, train, step);
        let loss = match loss {
            Ok(l) => l,
            Err(Error::NonFinite(reason)) => {
                model.load_exact(&best)?;
                saver.save(BEST_FILE, &model, &log, log.best_step, None)?;
                return Err(Error::Diverged { step, reason });
            }
            Err(e) => return Err(e),
        };
        let l = scalar(&loss)?;
        let grads = loss.backward()?;
        if let Err(e) = adam.step(model.params(), &grads) {
            model.load_exact(&best)?;
            saver.save(BEST_FILE, &model, &log, log.best_step, None)?;
            return Err(Error::Diverged { step, reason: e.to_string() });
        }
        log.train.push((step, l));
        if step % cfg.eval_every == 0 || step == total {
            if validate(&model, &mut log, step)? {
                best = model.params().snapshot(DType::F32)?;
                best_sha256 = saver.save(BEST_FILE, &model, &log, step, None)?;
            }
            saver.save(LAST_FILE, &model, &log, step, Some(&adam))?;
        }
    }
    if best_sha256.is_empty() {
        best_sha256 = saver.save(BEST_FILE, &model, &log, log.best_step, None)?;
    }
    model.load_exact(&best)?;
    Ok(TrainOutcome {
        model,
        log,
        best_path,
        best_sha256,
        last_path: out.join(LAST_FILE),
    })
}

/// Result of a two-phase run.
pub struct PretrainOutcome {
    pub pretrain: TrainOutcome,
    pub finetune: TrainOutcome,
}

/// Phase 1: fixed-rate training at `pretrain_rate_hz` on `pretrain`.
/// Phase 2: multi-rate training on `finetune`, warm-started from the
/// phase-1 best checkpoint. Outputs go to `out/pretrain` and `out/finetune`.
pub fn pretrain_then_finetune(
    cfg: &ExperimentConfig,
    pretrain: (&[LatentItem], &[LatentItem]),
    finetune: (&[LatentItem], &[LatentItem]),
    codec: &Codec,
    out: &Path,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if cfg.mode != TrainMode::PretrainThenFinetune {
        return Err(Error::Config("config mode must be pretrain_then_finetune".into()));
    }
    let p_cfg = cfg.pretrain_phase()?;
    let rate = p_cfg.rate_set[0];
    let keep = |items: &[LatentItem]| -> Vec<LatentItem> { items.iter().filter(|i| i.rate_hz == rate).cloned().collect() };
    let (p_train, p_valid) = (keep(pretrain.0), keep(pretrain.1));
    let phase1 = train_ldm(&p_cfg, &p_train, &p_valid, codec, &Start::Fresh, &out.join("pretrain"))?;
    let f_cfg = cfg.finetune_phase();
    let phase2 = train_ldm(
        &f_cfg,
        finetune.0,
        finetune.1,
        codec,
        &Start::From(phase1.best_path.clone()),
        &out.join("finetune"),
    )?;
    Ok(PretrainOutcome {
        pretrain: phase1,
        finetune: phase2,
    })
}
