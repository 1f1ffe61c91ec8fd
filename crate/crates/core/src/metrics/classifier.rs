use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::codec::MelNorm;
use crate::dataset::{EventClass, MelItem};
use crate::dsp::{extract_mel, resample, MelSpectrogram, RateConfig, Waveform};
use crate::error::{Error, Result};
use crate::nn::{scalar, silu, Adam, AdamConfig, Checkpoint, Conv2d, Linear, ParamStore};
use crate::rng::batch_indices;

/// Every clip is classified at this rate.
pub const CLASSIFIER_RATE: u32 = 16_000;
/// Frames the classifier sees; shorter mels are edge-padded, longer ones cropped.
pub const CLASSIFIER_FRAMES: usize = 104;
pub const EMBED_DIM: usize = 16;
pub const NUM_CLASSES: usize = EventClass::ALL.len();
const KIND: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Minimum held-out accuracy; training fails below it.
    pub gate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            gate: 0.9,
        }
    }
}

/// Small conv net on 16 kHz log-mels: class logits plus a penultimate embedding.
pub struct Classifier {
    pub norm: MelNorm,
    pub mel_dim: usize,
    /// Held-out accuracy measured after training.
    pub accuracy: f64,
    ps: ParamStore,
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
}

/// Output of a forward pass, one row per input.
pub struct ClassifierOutput {
    pub embeddings: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

impl ClassifierOutput {
    pub fn predictions(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|p| p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0))
            .collect()
    }
}

/// Log-mel of `w` at the classifier's rate, resampling first if needed.
pub fn classifier_mel(w: &Waveform) -> Result<MelSpectrogram> {
    let cfg = RateConfig::standard(CLASSIFIER_RATE)?;
    if w.rate_hz == CLASSIFIER_RATE {
        extract_mel(w, &cfg)
    } else {
        extract_mel(&resample(w, CLASSIFIER_RATE)?, &cfg)
    }
}

impl Classifier {
    pub fn new(mel_dim: usize, dtype: DType, seed: u64) -> Result<Self> {
        if mel_dim % 8 != 0 {
            return Err(Error::Config(format!("classifier needs mel_dim divisible by 8, got {mel_dim}")));
        }
        let mut ps = ParamStore::new(dtype, seed);
        let convs = vec![
            Conv2d::new(&mut ps, "conv.0", 1, 16, 3, 2)?,
            Conv2d::new(&mut ps, "conv.1", 16, 32, 3, 2)?,
            Conv2d::new(&mut ps, "conv.2", 32, 32, 3, 2)?,
        ];
        let flat = 32 * (CLASSIFIER_FRAMES / 8) * (mel_dim / 8);
        let fc1 = Linear::new(&mut ps, "fc1", flat, EMBED_DIM, true)?;
        let fc2 = Linear::new(&mut ps, "fc2", EMBED_DIM, NUM_CLASSES, true)?;
        Ok(Self {
            norm: MelNorm::default(),
            mel_dim,
            accuracy: 0.0,
            ps,
            convs,
            fc1,
            fc2,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    fn device(&self) -> &Device {
        self.ps.device()
    }

    /// `(B, 1, CLASSIFIER_FRAMES, mel_dim)` normalized input.
    pub fn batch(&self, mels: &[&MelSpectrogram]) -> Result<Tensor> {
        let d = self.mel_dim;
        let mut flat = Vec::with_capacity(mels.len() * CLASSIFIER_FRAMES * d);
        for m in mels {
            if m.mel_dim() != d || m.frames == 0 {
                return Err(Error::shape(format!("classifier expects {d}-band mels, got {} bands", m.mel_dim())));
            }
            if m.config.rate_hz != CLASSIFIER_RATE {
                return Err(Error::invalid(format!("classifier input must be at {CLASSIFIER_RATE} Hz, got {}", m.config.rate_hz)));
            }
            for f in 0..CLASSIFIER_FRAMES {
                let row = m.row(f.min(m.frames - 1));
                flat.extend(row.iter().map(|&v| (v as f64 - self.norm.mean) / self.norm.std));
            }
        }
        Ok(Tensor::from_vec(flat, (mels.len(), 1, CLASSIFIER_FRAMES, d), self.device())?.to_dtype(self.ps.dtype())?)
    }

    /// Embeddings `(B, E)` and logits `(B, K)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for c in &self.convs {
            h = silu(&c.forward(&h)?)?;
        }
        let h = h.flatten_from(1)?;
        let emb = silu(&self.fc1.forward(&h)?)?;
        let logits = self.fc2.forward(&emb)?;
        Ok((emb, logits))
    }

    pub fn classify(&self, mels: &[&MelSpectrogram]) -> Result<ClassifierOutput> {
        let mut out = ClassifierOutput {
            embeddings: Vec::with_capacity(mels.len()),
            probs: Vec::with_capacity(mels.len()),
        };
        for chunk in mels.chunks(64) {
            let (emb, logits) = self.forward(&self.batch(chunk)?)?;
            let probs = candle_nn::ops::softmax(&logits.to_dtype(DType::F64)?, D::Minus1)?;
            out.embeddings.extend(emb.to_dtype(DType::F64)?.to_vec2::<f64>()?);
            out.probs.extend(probs.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    pub fn classify_waveforms(&self, clips: &[Waveform]) -> Result<ClassifierOutput> {
        let mels: Vec<MelSpectrogram> = clips.iter().map(classifier_mel).collect::<Result<_>>()?;
        self.classify(&mels.iter().collect::<Vec<_>>())
    }

    fn loss(&self, mels: &[&MelSpectrogram], labels: &[u32]) -> Result<Tensor> {
        let (_, logits) = self.forward(&self.batch(mels)?)?;
        let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        let y = Tensor::new(labels, self.device())?.unsqueeze(1)?;
        Ok(logp.gather(&y, 1)?.neg()?.mean_all()?)
    }

    pub fn accuracy_on(&self, items: &[MelItem]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::invalid("no items to score"));
        }
        let mels: Vec<&MelSpectrogram> = items.iter().map(|i| &i.mel).collect();
        let pred = self.classify(&mels)?.predictions();
        let hits = pred.iter().zip(items).filter(|(p, i)| **p == i.class.index()).count();
        Ok(hits as f64 / items.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = serde_json::json!({
            "kind": KIND,
            "norm": self.norm,
            "mel_dim": self.mel_dim,
            "accuracy": self.accuracy,
        });
        Checkpoint::new(self.ps.snapshot(DType::F32)?, meta).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let bad = |m: &str| Error::format(path, m.to_string());
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(KIND) {
            return Err(bad("not a classifier checkpoint"));
        }
        let mel_dim = ck.meta.get("mel_dim").and_then(|v| v.as_u64()).ok_or_else(|| bad("missing mel_dim"))? as usize;
        let norm: MelNorm = serde_json::from_value(ck.meta.get("norm").cloned().ok_or_else(|| bad("missing norm"))?)?;
        let mut c = Self::new(mel_dim, DType::F32, 0)?;
        let missing = c.ps.load(&ck.tensors, "")?;
        if !missing.is_empty() {
            return Err(bad("classifier tensors missing"));
        }
        c.norm = norm;
        c.accuracy = ck.meta.get("accuracy").and_then(|v| v.as_f64()).unwrap_or(0.0);
        Ok(c)
    }
}

/// Trains on `train` (16 kHz mels), keeps the parameters with the best
/// accuracy on `valid`, and fails if accuracy on `test` is below the gate.
pub fn train_classifier(train: &[MelItem], valid: &[MelItem], test: &[MelItem], cfg: &ClassifierConfig) -> Result<Classifier> {
    let pick = |items: &[MelItem]| -> Vec<MelItem> { items.iter().filter(|i| i.rate_hz == CLASSIFIER_RATE).cloned().collect() };
    let (train, valid, test) = (pick(train), pick(valid), pick(test));
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid(format!("classifier needs {CLASSIFIER_RATE} Hz train and test clips")));
    }
    let valid = if valid.is_empty() { train.clone() } else { valid };
    let mel_dim = train[0].mel.mel_dim();
    let mut clf = Classifier::new(mel_dim, DType::F32, cfg.seed)?;
    clf.norm = MelNorm::fit(train.iter().map(|i| &i.mel));
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let every = 50.min(cfg.steps.max(1));
    let mut best = (clf.accuracy_on(&valid)?, clf.ps.snapshot(DType::F32)?);
    let b = cfg.batch_size.clamp(1, train.len());
    for step in 0..cfg.steps {
        let idx = batch_indices(train.len(), b, cfg.seed, step);
        let mels: Vec<&MelSpectrogram> = idx.iter().map(|&i| &train[i].mel).collect();
        let labels: Vec<u32> = idx.iter().map(|&i| train[i].class.index() as u32).collect();
        let loss = clf.loss(&mels, &labels)?;
        let l = scalar(&loss)?;
        if !l.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("classifier loss {l}"),
            });
        }
        opt.step(&clf.ps, &loss.backward()?)?;
        if (step + 1) % every == 0 || step + 1 == cfg.steps {
            let acc = clf.accuracy_on(&valid)?;
            if acc > best.0 {
                best = (acc, clf.ps.snapshot(DType::F32)?);
            }
        }
    }
    clf.ps.load(&best.1, "")?;
    clf.accuracy = clf.accuracy_on(&test)?;
    if clf.accuracy < cfg.gate {
        return Err(Error::Gate(format!(
            "classifier held-out accuracy {:.3} is below {:.2}; metrics would be meaningless",
            clf.accuracy, cfg.gate
        )));
    }
    Ok(clf)
}
