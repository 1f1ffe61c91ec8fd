//! Small convolutional VAE compressing log-mel spectrograms by 4× along
//! both axes into a `C`-channel latent.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::MelItem;
use crate::diffusion::batch_noise;
use crate::dsp::{MelSpectrogram, RateConfig};
use crate::error::{Error, Result};
use crate::nn::{scalar, silu, upsample2x, Adam, AdamConfig, Checkpoint, Conv2d, ParamStore, TrainLog};
use crate::rng::batch_indices;

/// Spatial reduction factor on each axis.
pub const DOWNSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub latent_channels: usize,
    pub hidden: [usize; 2],
    pub kl_weight: f64,
    pub mel_dim: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            hidden: [16, 32],
            kl_weight: 1e-4,
            mel_dim: 64,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("codec widths must be positive".into()));
        }
        if self.mel_dim % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!("mel_dim {} not divisible by {DOWNSAMPLE}", self.mel_dim)));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Global affine normalization applied to log-mels before encoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for MelNorm {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl MelNorm {
    pub fn fit<'a>(mels: impl IntoIterator<Item = &'a MelSpectrogram>) -> Self {
        let (mut n, mut s, mut s2) = (0usize, 0.0f64, 0.0f64);
        for m in mels {
            for &v in &m.values {
                n += 1;
                s += v as f64;
                s2 += (v as f64) * (v as f64);
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        Self {
            mean,
            std: var.sqrt().max(1e-3),
        }
    }
}

/// A compressed mel-spectrogram, `C × t × f`.
#[derive(Clone, Debug)]
pub struct Latent {
    pub values: Tensor,
    /// Multiplier bringing latent components to roughly unit variance.
    pub scale_factor: f64,
    pub source_config: RateConfig,
    /// Frame count of the mel this latent was computed from, before padding.
    pub frames: usize,
}

impl Latent {
    pub fn scaled(&self) -> Result<Tensor> {
        Ok((&self.values * self.scale_factor)?)
    }

    pub fn from_scaled(z: Tensor, scale_factor: f64, source_config: RateConfig, frames: usize) -> Result<Self> {
        Ok(Self {
            values: (z / scale_factor)?,
            scale_factor,
            source_config,
            frames,
        })
    }
}

pub fn padded_frames(frames: usize) -> usize {
    frames.div_ceil(DOWNSAMPLE) * DOWNSAMPLE
}

/// Latent time extent for a mel of `frames` frames.
pub fn latent_frames(frames: usize) -> usize {
    padded_frames(frames) / DOWNSAMPLE
}

pub struct CodecLoss {
    pub total: Tensor,
    pub recon: Tensor,
    pub kl: Tensor,
}

pub struct Codec {
    pub config: CodecConfig,
    pub norm: MelNorm,
    pub scale_factor: f64,
    ps: ParamStore,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
}

impl Codec {
    pub fn new(config: CodecConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype, seed);
        let [h0, h1] = config.hidden;
        let c = config.latent_channels;
        let enc = vec![
            Conv2d::new(&mut ps, "enc.0", 1, h0, 3, 1)?,
            Conv2d::new(&mut ps, "enc.1", h0, h0, 3, 2)?,
            Conv2d::new(&mut ps, "enc.2", h0, h1, 3, 1)?,
            Conv2d::new(&mut ps, "enc.3", h1, h1, 3, 2)?,
            Conv2d::new(&mut ps, "enc.4", h1, 2 * c, 3, 1)?,
        ];
        let dec = vec![
            Conv2d::new(&mut ps, "dec.0", c, h1, 3, 1)?,
            Conv2d::new(&mut ps, "dec.1", h1, h0, 3, 1)?,
            Conv2d::new(&mut ps, "dec.2", h0, h0, 3, 1)?,
            Conv2d::new(&mut ps, "dec.3", h0, h0, 3, 1)?,
            Conv2d::new(&mut ps, "dec.4", h0, 1, 3, 1)?,
        ];
        Ok(Self {
            config,
            norm: MelNorm::default(),
            scale_factor: 1.0,
            ps,
            enc,
            dec,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    pub fn device(&self) -> &Device {
        self.ps.device()
    }

    /// Normalized, edge-padded batch `(B, 1, T', mel_dim)`. All mels must share a shape.
    pub fn mel_batch(&self, mels: &[&MelSpectrogram]) -> Result<Tensor> {
        let first = mels.first().ok_or_else(|| Error::invalid("empty mel batch"))?;
        let (frames, d) = (first.frames, first.mel_dim());
        if d != self.config.mel_dim {
            return Err(Error::shape(format!("mel has {d} bands, codec expects {}", self.config.mel_dim)));
        }
        let tp = padded_frames(frames);
        let mut flat = Vec::with_capacity(mels.len() * tp * d);
        for m in mels {
            if m.frames != frames || m.mel_dim() != d {
                return Err(Error::shape("mels in a batch must share a shape"));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite("mel passed to the codec".into()));
            }
            for f in 0..tp {
                let row = m.row(f.min(frames - 1));
                flat.extend(row.iter().map(|&v| (v as f64 - self.norm.mean) / self.norm.std));
            }
        }
        Ok(Tensor::from_vec(flat, (mels.len(), 1, tp, d), self.device())?.to_dtype(self.dtype())?)
    }

    /// Posterior mean and log-variance, each `(B, C, T'/4, mel_dim/4)`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, ch, t, f) = x.dims4()?;
        if ch != 1 || t % DOWNSAMPLE != 0 || f != self.config.mel_dim {
            return Err(Error::shape(format!("codec input {:?} not (B, 1, 4k, {})", x.dims(), self.config.mel_dim)));
        }
        let mut h = x.clone();
        let last = self.enc.len() - 1;
        for (i, conv) in self.enc.iter().enumerate() {
            h = conv.forward(&h)?;
            if i < last {
                h = silu(&h)?;
            }
        }
        let c = self.config.latent_channels;
        let mean = h.narrow(1, 0, c)?;
        let logvar = h.narrow(1, c, c)?.clamp(-30.0, 20.0)?;
        Ok((mean, logvar))
    }

    /// Normalized mel `(B, 1, 4t, 4f)` from a raw (unscaled) latent batch.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, f) = z.dims4()?;
        if c != self.config.latent_channels || f * DOWNSAMPLE != self.config.mel_dim {
            return Err(Error::shape(format!(
                "latent {:?} does not match codec ({} channels, {} bands)",
                z.dims(),
                self.config.latent_channels,
                self.config.mel_dim / DOWNSAMPLE
            )));
        }
        let mut h = silu(&self.dec[0].forward(z)?)?;
        h = upsample2x(&h)?;
        h = silu(&self.dec[1].forward(&h)?)?;
        h = silu(&self.dec[2].forward(&h)?)?;
        h = upsample2x(&h)?;
        h = silu(&self.dec[3].forward(&h)?)?;
        self.dec[4].forward(&h)
    }

    pub fn encode(&self, m: &MelSpectrogram) -> Result<(Latent, Latent)> {
        let x = self.mel_batch(&[m])?;
        let (mean, logvar) = self.encode_tensor(&x)?;
        let wrap = |t: Tensor| Latent {
            values: t,
            scale_factor: self.scale_factor,
            source_config: m.config.clone(),
            frames: m.frames,
        };
        Ok((wrap(mean.get(0)?), wrap(logvar.get(0)?)))
    }

    pub fn decode(&self, z: &Latent) -> Result<MelSpectrogram> {
        let x = self.decode_tensor(&z.values.unsqueeze(0)?)?;
        self.to_mel(&x.get(0)?, z.frames, &z.source_config)
    }

    /// Denormalizes one decoded `(1, T', d)` tensor and crops it to `frames`.
    pub fn to_mel(&self, x: &Tensor, frames: usize, config: &RateConfig) -> Result<MelSpectrogram> {
        let (_, tp, d) = x.dims3()?;
        if frames > tp {
            return Err(Error::shape(format!("cannot crop {tp} decoded frames to {frames}")));
        }
        let flat = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let values = flat[..frames * d]
            .iter()
            .map(|&v| (v * self.norm.std + self.norm.mean) as f32)
            .collect();
        let mel = MelSpectrogram::new(values, frames, config.clone())?;
        if !mel.is_finite() {
            return Err(Error::NonFinite("decoded mel".into()));
        }
        Ok(mel)
    }

    /// Reconstruction MSE plus `kl_weight` times the mean per-element KL to `N(0, I)`.
    pub fn loss(&self, x: &Tensor, seed: u64) -> Result<CodecLoss> {
        let (mean, logvar) = self.encode_tensor(x)?;
        let noise = batch_noise(mean.dims(), seed, mean.dtype(), mean.device())?;
        let z = (&mean + ((&logvar * 0.5)?.exp()? * noise)?)?;
        let recon = (self.decode_tensor(&z)? - x)?.sqr()?.mean_all()?;
        let kl = ((mean.sqr()? + logvar.exp()? - &logvar)? - 1.0)?.mean_all()? * 0.5;
        let kl = kl?;
        let total = (&recon + (&kl * self.config.kl_weight)?)?;
        Ok(CodecLoss { total, recon, kl })
    }

    /// Scaled posterior means for a batch of same-shape mels, `(B, C, t, f)`.
    pub fn latents(&self, mels: &[&MelSpectrogram]) -> Result<Tensor> {
        let (mean, _) = self.encode_tensor(&self.mel_batch(mels)?)?;
        Ok((mean * self.scale_factor)?.detach())
    }

    /// Sets `scale_factor` to the reciprocal standard deviation of the
    /// posterior means over `mels`.
    pub fn fit_scale(&mut self, mels: &[&MelSpectrogram]) -> Result<f64> {
        self.scale_factor = 1.0;
        let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
        for chunk in mels.chunks(32) {
            let z = self.latents(chunk)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            n += z.len();
            s += z.iter().sum::<f64>();
            s2 += z.iter().map(|v| v * v).sum::<f64>();
        }
        if n == 0 {
            return Err(Error::invalid("no mels to fit the latent scale"));
        }
        let mean = s / n as f64;
        let std = (s2 / n as f64 - mean * mean).max(0.0).sqrt();
        if !(std > 1e-8) {
            return Err(Error::NonFinite(format!("latent standard deviation {std}")));
        }
        self.scale_factor = 1.0 / std;
        Ok(self.scale_factor)
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "norm": self.norm,
            "scale_factor": self.scale_factor,
        })
    }

    /// Parameter tensors keyed `<prefix><name>`, in f32.
    pub fn tensors(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        Ok(self
            .ps
            .snapshot(DType::F32)?
            .into_iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v))
            .collect())
    }

    /// Rebuilds a codec from [`Codec::meta`] output and tensors under `prefix`.
    pub fn restore(meta: &serde_json::Value, tensors: &BTreeMap<String, Tensor>, prefix: &str, dtype: DType) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("codec metadata: {what}"));
        let config: CodecConfig = serde_json::from_value(meta.get("config").cloned().ok_or_else(|| bad("missing config"))?)?;
        let norm: MelNorm = serde_json::from_value(meta.get("norm").cloned().ok_or_else(|| bad("missing norm"))?)?;
        let scale_factor = meta
            .get("scale_factor")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| bad("missing scale_factor"))?;
        let mut codec = Self::new(config, dtype, 0)?;
        let missing = codec.ps.load(tensors, prefix)?;
        if !missing.is_empty() {
            return Err(Error::Config(format!("codec tensors missing: {}", missing.join(", "))));
        }
        codec.norm = norm;
        codec.scale_factor = scale_factor;
        Ok(codec)
    }
}

const CODEC_KIND: &str = "codec";

impl Codec {
    /// Writes a standalone codec checkpoint and returns its SHA-256.
    pub fn save(&self, path: &Path, log: Option<&TrainLog>) -> Result<String> {
        let meta = serde_json::json!({
            "kind": CODEC_KIND,
            "codec": self.meta(),
            "log": log,
        });
        Checkpoint::new(self.tensors("")?, meta).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(CODEC_KIND) {
            return Err(Error::format(path, "not a codec checkpoint"));
        }
        let meta = ck.meta.get("codec").cloned().unwrap_or_default();
        Self::restore(&meta, &ck.tensors, "", DType::F32).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub codec: CodecConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            steps: 600,
            batch_size: 16,
            lr: 2e-3,
            eval_every: 100,
            seed: 0,
        }
    }
}

fn validation_loss(codec: &Codec, valid: &[&MelSpectrogram], seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, chunk) in valid.chunks(32).enumerate() {
        let l = codec.loss(&codec.mel_batch(chunk)?, seed ^ (i as u64).wrapping_mul(0x9E37))?;
        total += scalar(&l.total)? * chunk.len() as f64;
    }
    Ok(total / valid.len() as f64)
}

/// Trains a codec and returns the parameters with the best validation loss,
/// with normalization and latent scale fitted on `train`.
pub fn train_codec(train: &[MelItem], valid: &[MelItem], cfg: &CodecTrainConfig) -> Result<(Codec, TrainLog)> {
    if train.is_empty() {
        return Err(Error::invalid("codec training split is empty"));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("batch_size and eval_every must be positive".into()));
    }
    let mut codec = Codec::new(cfg.codec.clone(), DType::F32, cfg.seed)?;
    let train_mels: Vec<&MelSpectrogram> = train.iter().map(|m| &m.mel).collect();
    let valid_mels: Vec<&MelSpectrogram> = if valid.is_empty() {
        train_mels.clone()
    } else {
        valid.iter().map(|m| &m.mel).collect()
    };
    codec.norm = MelNorm::fit(train_mels.iter().copied());
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut log = TrainLog {
        best_valid: f64::INFINITY,
        ..Default::default()
    };
    let mut best = codec.ps.snapshot(DType::F32)?;
    let valid_seed = crate::rng::mix_seed(&[cfg.seed, 0x7A11D]);
    for step in 1..=cfg.steps {
        let idx = batch_indices(train_mels.len(), cfg.batch_size.min(train_mels.len()), cfg.seed, step - 1);
        let batch: Vec<&MelSpectrogram> = idx.iter().map(|&i| train_mels[i]).collect();
        let x = codec.mel_batch(&batch)?;
        let loss = codec.loss(&x, crate::rng::mix_seed(&[cfg.seed, step as u64]))?;
        let l = scalar(&loss.total)?;
        if !l.is_finite() {
            codec.ps.load(&best, "")?;
            return Err(Error::Diverged {
                step,
                reason: format!("codec loss {l}"),
            });
        }
        let grads = loss.total.backward()?;
        opt.step(&codec.ps, &grads)?;
        log.train.push((step, l));
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let v = validation_loss(&codec, &valid_mels, valid_seed)?;
            log.valid.push((step, v));
            if v < log.best_valid {
                log.best_valid = v;
                log.best_step = step;
                best = codec.ps.snapshot(DType::F32)?;
            }
        }
    }
    codec.ps.load(&best, "")?;
    codec.fit_scale(&train_mels)?;
    Ok((codec, log))
}

/// `mean + exp(logvar / 2) ⊙ ε` with `ε` drawn from `seed`.
pub fn reparameterize(mean: &Latent, logvar: &Latent, seed: u64) -> Result<Latent> {
    if mean.values.dims() != logvar.values.dims() {
        return Err(Error::shape(format!(
            "mean {:?} vs logvar {:?}",
            mean.values.dims(),
            logvar.values.dims()
        )));
    }
    let v = &mean.values;
    let eps = crate::diffusion::gaussian(v.dims(), &[seed, 0x4E9A], v.dtype(), v.device())?;
    Ok(Latent {
        values: (v + ((&logvar.values * 0.5)?.exp()? * eps)?)?,
        ..mean.clone()
    })
}
