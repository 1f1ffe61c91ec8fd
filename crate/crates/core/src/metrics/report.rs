use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::{classifier_mel, Classifier};
use super::stats::{frechet_distance, inception_score, paired_kl};
use crate::dataset::{DatasetManifest, ManifestEntry, Split};
use crate::diffusion::SamplerConfig;
use crate::dsp::{MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::rng::mix_seed;
use crate::train::{GenRequest, Pipeline};

/// Largest tolerated fraction of failed generations per rate.
pub const MAX_FAILURE_RATE: f64 = 0.05;
const GEN_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateMetrics {
    pub fd: f64,
    pub is: f64,
    pub kl: f64,
    pub prompt_acc: f64,
    pub n: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    /// Keyed by rate in Hz.
    pub rates: BTreeMap<u32, RateMetrics>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Aligned text table, one row per rate.
    pub fn table(&self, model: &str) -> String {
        let rows: Vec<(String, u32, &RateMetrics)> = self.rates.iter().map(|(r, m)| (model.to_string(), *r, m)).collect();
        render_table(&rows)
    }

    /// Unweighted means over rates.
    pub fn overall(&self) -> Option<RateMetrics> {
        let n = self.rates.len();
        if n == 0 {
            return None;
        }
        let mean = |f: fn(&RateMetrics) -> f64| self.rates.values().map(f).sum::<f64>() / n as f64;
        Some(RateMetrics {
            fd: mean(|m| m.fd),
            is: mean(|m| m.is),
            kl: mean(|m| m.kl),
            prompt_acc: mean(|m| m.prompt_acc),
            n: self.rates.values().map(|m| m.n).sum(),
            failures: self.rates.values().map(|m| m.failures).sum(),
        })
    }
}

/// Table in the layout `Model | Sr | FD | IS | KL | Acc | n`.
pub fn render_table(rows: &[(String, u32, &RateMetrics)]) -> String {
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:<w$}  {:>6}  {:>8}  {:>6}  {:>6}  {:>6}  {:>4}", "Model", "Sr", "FD", "IS", "KL", "Acc", "n");
    let _ = writeln!(s, "{}", "-".repeat(w + 50));
    for (name, rate, m) in rows {
        let _ = writeln!(
            s,
            "{:<w$}  {:>6}  {:>8.3}  {:>6.3}  {:>6.3}  {:>6.3}  {:>4}",
            name,
            format!("{}k", rate / 1000),
            m.fd,
            m.is,
            m.kl,
            m.prompt_acc,
            m.n
        );
    }
    s
}

/// Scores a set of clips against paired reference clips of known class.
pub fn score_clips(classifier: &Classifier, generated: &[MelSpectrogram], reference: &[MelSpectrogram], classes: &[usize]) -> Result<RateMetrics> {
    if generated.len() != classes.len() {
        return Err(Error::invalid("one class label per generated clip"));
    }
    let gen = classifier.classify(&generated.iter().collect::<Vec<_>>())?;
    let refs = classifier.classify(&reference.iter().collect::<Vec<_>>())?;
    let hits = gen.predictions().iter().zip(classes).filter(|(p, c)| p == c).count();
    Ok(RateMetrics {
        fd: frechet_distance(&gen.embeddings, &refs.embeddings)?,
        is: inception_score(&gen.probs)?,
        kl: paired_kl(&gen.probs, &refs.probs)?,
        prompt_acc: hits as f64 / generated.len().max(1) as f64,
        n: generated.len(),
        failures: 0,
    })
}

/// Generates clips for `requests` in chunks; a failed chunk is retried one
/// request at a time and individual failures come back as `None`.
pub fn generate_all(pipeline: &Pipeline, requests: &[GenRequest], sampler: &SamplerConfig) -> Vec<Option<Waveform>> {
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(GEN_CHUNK) {
        match pipeline.generate_batch(chunk, sampler) {
            Ok(ws) => out.extend(ws.into_iter().map(Some)),
            Err(_) => {
                for r in chunk {
                    out.push(pipeline.generate_batch(std::slice::from_ref(r), sampler).ok().map(|mut v| v.remove(0)));
                }
            }
        }
    }
    out
}

/// Test-split clips at `rate_hz`, one per underlying event.
pub fn test_entries(manifest: &DatasetManifest, rate_hz: u32) -> Vec<&ManifestEntry> {
    manifest.select(Some(Split::Test), Some(rate_hz))
}

/// Per-rate FD, IS, paired KL and prompt accuracy of `pipeline` on the
/// test captions of `manifest`, with every clip classified at 16 kHz.
pub fn evaluate_model(
    pipeline: &Pipeline,
    classifier: &Classifier,
    manifest: &DatasetManifest,
    sampler: &SamplerConfig,
    rates: &[u32],
) -> Result<MetricReport> {
    let mut report = MetricReport {
        config_hash: pipeline.meta.config_hash.clone(),
        rates: BTreeMap::new(),
    };
    for &rate in rates {
        let entries = test_entries(manifest, rate);
        if entries.is_empty() {
            return Err(Error::invalid(format!("no test clips at {rate} Hz")));
        }
        let requests: Vec<GenRequest> = entries
            .iter()
            .map(|e| GenRequest {
                prompt: e.caption.clone(),
                rate_hz: rate,
                seed: mix_seed(&[sampler.seed, e.clip as u64]),
            })
            .collect();
        let generated = generate_all(pipeline, &requests, sampler);
        let failures = generated.iter().filter(|g| g.is_none()).count();
        if failures as f64 > MAX_FAILURE_RATE * requests.len() as f64 {
            return Err(Error::invalid(format!("{failures} of {} generations failed at {rate} Hz", requests.len())));
        }
        let mut gen_mels = Vec::new();
        let mut classes = Vec::new();
        for (g, e) in generated.iter().zip(&entries) {
            if let Some(w) = g {
                gen_mels.push(classifier_mel(w)?);
                classes.push(e.class.index());
            }
        }
        let kept: Vec<&ManifestEntry> = generated.iter().zip(&entries).filter(|(g, _)| g.is_some()).map(|(_, e)| *e).collect();
        let ref_mels: Vec<MelSpectrogram> = kept.iter().map(|e| classifier_mel(&manifest.audio(e)?)).collect::<Result<_>>()?;
        let mut m = score_clips(classifier, &gen_mels, &ref_mels, &classes)?;
        m.failures = failures;
        report.rates.insert(rate, m);
    }
    Ok(report)
}
