//! The full experiment grid: per-rate baselines, one joint multi-rate model
//! and a low-rate pretrain then multi-rate finetune model, each evaluated
//! per rate and rendered as comparison tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{train_codec, Codec, CodecTrainConfig};
use crate::dataset::{build_corpus, load_mels, CorpusConfig, DatasetManifest, MelItem, Split};
use crate::dsp::STANDARD_RATES;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, render_table, train_classifier, Classifier, ClassifierConfig, RateMetrics};
use crate::train::{encode_items, pretrain_then_finetune, train_ldm, ExperimentConfig, LatentItem, Pipeline, Start, TrainMode};
use crate::unet::UNetConfig;

pub const METRICS_FILE: &str = "metrics.json";
pub const TABLES_FILE: &str = "tables.txt";
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReproConfig {
    pub seed: u64,
    pub rates: Vec<u32>,
    pub per_class: usize,
    /// Pretrain corpus size as a multiple of `per_class`.
    pub pretrain_factor: usize,
    pub pretrain_rate_hz: u32,
    pub duration_s: f64,
    pub codec: CodecTrainConfig,
    pub classifier: ClassifierConfig,
    /// Shared training settings for every cell; mode and rates are set per cell.
    pub experiment: ExperimentConfig,
}

impl Default for ReproConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rates: STANDARD_RATES.to_vec(),
            per_class: 50,
            pretrain_factor: 4,
            pretrain_rate_hz: 16_000,
            duration_s: 1.0,
            codec: CodecTrainConfig::default(),
            classifier: ClassifierConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl ReproConfig {
    /// A seconds-scale grid for smoke and determinism checks.
    pub fn micro(seed: u64) -> Self {
        let mut experiment = ExperimentConfig {
            seed,
            max_steps: Some(3),
            pretrain_max_steps: Some(3),
            batch_size: 4,
            eval_every: 2,
            unet: UNetConfig {
                widths: vec![16, 32],
                ..Default::default()
            },
            ..Default::default()
        };
        experiment.sampler.num_steps = 3;
        Self {
            seed,
            per_class: 25,
            pretrain_factor: 1,
            codec: CodecTrainConfig {
                steps: 4,
                batch_size: 8,
                eval_every: 2,
                seed,
                ..Default::default()
            },
            classifier: ClassifierConfig {
                steps: 4,
                gate: 0.0,
                seed,
                ..Default::default()
            },
            experiment,
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn cell_config(&self, mode: TrainMode, rates: &[u32]) -> ExperimentConfig {
        ExperimentConfig {
            mode,
            rate_set: rates.to_vec(),
            pretrain_rate_hz: (mode == TrainMode::PretrainThenFinetune).then_some(self.pretrain_rate_hz),
            seed: self.seed,
            ..self.experiment.clone()
        }
    }

    pub fn config_hash(&self) -> String {
        crate::nn::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Metrics of one grid cell, or the reason it failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellResult {
    Ok(BTreeMap<u32, RateMetrics>),
    Failed(String),
}

/// Everything that goes into `metrics.json`. Contains no timings so reruns
/// are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub seed: u64,
    pub config_hash: String,
    pub classifier_accuracy: f64,
    /// One fixed-rate model per rate.
    pub per_rate: BTreeMap<u32, CellResult>,
    /// One model conditioned on every rate.
    pub joint: CellResult,
    /// Low-rate pretraining then multi-rate finetuning.
    pub pretrain_finetune: CellResult,
}

pub struct ReproOutcome {
    pub report: ReproReport,
    pub dir: PathBuf,
    pub tables: String,
}

fn cell<F>(timings: &mut BTreeMap<String, f64>, name: &str, f: F) -> CellResult
where
    F: FnOnce() -> Result<BTreeMap<u32, RateMetrics>>,
{
    let t = Instant::now();
    let r = match f() {
        Ok(m) => CellResult::Ok(m),
        Err(e) => CellResult::Failed(e.to_string()),
    };
    timings.insert(name.to_string(), t.elapsed().as_secs_f64());
    r
}

fn eval(ckpt: &Path, clf: &Classifier, manifest: &DatasetManifest, cfg: &ExperimentConfig, rates: &[u32]) -> Result<BTreeMap<u32, RateMetrics>> {
    let p = Pipeline::load(ckpt)?;
    Ok(evaluate_model(&p, clf, manifest, &cfg.sampler, rates)?.rates)
}

fn with_rates(items: &[LatentItem], rates: &[u32]) -> Vec<LatentItem> {
    items.iter().filter(|i| rates.contains(&i.rate_hz)).cloned().collect()
}

/// Runs the grid under `out` and writes `metrics.json`, `tables.txt` and
/// `timings.json`. Fails only if more than one cell fails.
pub fn repro_tables(cfg: &ReproConfig, out: &Path) -> Result<ReproOutcome> {
    cfg.experiment.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut timings = BTreeMap::new();
    let start = Instant::now();

    let corpus = CorpusConfig {
        duration_s: cfg.duration_s,
        ..CorpusConfig::new(cfg.per_class, &cfg.rates)
    };
    let manifest = build_corpus(&corpus, cfg.seed, out.join("data"))?;
    let pre_corpus = CorpusConfig {
        duration_s: cfg.duration_s,
        ..CorpusConfig::new(cfg.per_class * cfg.pretrain_factor, &[cfg.pretrain_rate_hz])
    };
    let pre_manifest = build_corpus(&pre_corpus, cfg.seed.wrapping_add(1), out.join("pretrain_data"))?;
    timings.insert("data".into(), start.elapsed().as_secs_f64());

    let mels = |m: &DatasetManifest, s: Split| -> Result<Vec<MelItem>> { load_mels(m, Some(s), None) };
    let (train, valid, test) = (mels(&manifest, Split::Train)?, mels(&manifest, Split::Valid)?, mels(&manifest, Split::Test)?);
    let (p_train, p_valid) = (mels(&pre_manifest, Split::Train)?, mels(&pre_manifest, Split::Valid)?);

    let t = Instant::now();
    let codec_cfg = CodecTrainConfig {
        seed: cfg.seed,
        ..cfg.codec.clone()
    };
    let (codec, codec_log): (Codec, _) = train_codec(&train, &valid, &codec_cfg)?;
    codec.save(&out.join("codec.safetensors"), Some(&codec_log))?;
    let clf = train_classifier(&train, &valid, &test, &cfg.classifier)?;
    clf.save(&out.join("classifier.safetensors"))?;
    timings.insert("codec_and_classifier".into(), t.elapsed().as_secs_f64());

    let (l_train, l_valid) = (encode_items(&codec, &train)?, encode_items(&codec, &valid)?);
    let (lp_train, lp_valid) = (encode_items(&codec, &p_train)?, encode_items(&codec, &p_valid)?);

    let mut per_rate = BTreeMap::new();
    for &r in &cfg.rates {
        let name = format!("fixed_{r}");
        let res = cell(&mut timings, &name, || {
            let c = cfg.cell_config(TrainMode::FixedRate, &[r]);
            let o = train_ldm(&c, &with_rates(&l_train, &[r]), &with_rates(&l_valid, &[r]), &codec, &Start::Fresh, &out.join(&name))?;
            eval(&o.best_path, &clf, &manifest, &c, &[r])
        });
        per_rate.insert(r, res);
    }
    let joint = cell(&mut timings, "joint", || {
        let c = cfg.cell_config(TrainMode::MultiRate, &cfg.rates);
        let o = train_ldm(&c, &l_train, &l_valid, &codec, &Start::Fresh, &out.join("joint"))?;
        eval(&o.best_path, &clf, &manifest, &c, &cfg.rates)
    });
    let pretrain_finetune = cell(&mut timings, "pretrain_finetune", || {
        let c = cfg.cell_config(TrainMode::PretrainThenFinetune, &cfg.rates);
        let o = pretrain_then_finetune(&c, (&lp_train, &lp_valid), (&l_train, &l_valid), &codec, &out.join("pretrain_finetune"))?;
        eval(&o.finetune.best_path, &clf, &manifest, &c.finetune_phase(), &cfg.rates)
    });
    timings.insert("total".into(), start.elapsed().as_secs_f64());

    let report = ReproReport {
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        classifier_accuracy: clf.accuracy,
        per_rate,
        joint,
        pretrain_finetune,
    };
    let failed = report.per_rate.values().chain([&report.joint, &report.pretrain_finetune]).filter(|c| matches!(c, CellResult::Failed(_))).count();
    std::fs::write(out.join(METRICS_FILE), serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join(TIMINGS_FILE), serde_json::to_string_pretty(&timings)? + "\n").map_err(|e| Error::io(out, e))?;
    let tables = render_report(&report, &timings);
    std::fs::write(out.join(TABLES_FILE), &tables).map_err(|e| Error::io(out, e))?;
    if failed > 1 {
        return Err(Error::invalid(format!("{failed} grid cells failed; see {}", out.join(METRICS_FILE).display())));
    }
    Ok(ReproOutcome {
        report,
        dir: out.to_path_buf(),
        tables,
    })
}

fn rows<'a>(name: &str, cell: &'a CellResult, out: &mut Vec<(String, u32, &'a RateMetrics)>, notes: &mut Vec<String>) {
    match cell {
        CellResult::Ok(m) => out.extend(m.iter().map(|(r, v)| (name.to_string(), *r, v))),
        CellResult::Failed(e) => notes.push(format!("{name}: failed: {e}")),
    }
}

/// Two tables: per-rate vs joint models, then scratch vs pretrained.
pub fn render_report(report: &ReproReport, timings: &BTreeMap<String, f64>) -> String {
    let mut notes = Vec::new();
    let mut t1 = Vec::new();
    rows("joint (rate-conditioned)", &report.joint, &mut t1, &mut notes);
    for (r, c) in &report.per_rate {
        rows(&format!("per-rate ({}k only)", r / 1000), c, &mut t1, &mut notes);
    }
    let mut t2 = Vec::new();
    rows("from scratch", &report.joint, &mut t2, &mut Vec::new());
    rows("pretrain 16k + finetune", &report.pretrain_finetune, &mut t2, &mut notes);
    let mut s = format!(
        "seed {}  config {}  classifier accuracy {:.3}\n\nJoint rate-conditioned model vs separate per-rate models\n",
        report.seed,
        &report.config_hash[..12.min(report.config_hash.len())],
        report.classifier_accuracy
    );
    s += &render_table(&t1);
    s += "\nMulti-rate training from scratch vs low-rate pretraining\n";
    s += &render_table(&t2);
    if !notes.is_empty() {
        s += "\n";
        for n in notes {
            s += &n;
            s += "\n";
        }
    }
    s += "\nwall-clock (s)\n";
    for (k, v) in timings {
        s += &format!("  {k:<24} {v:>9.1}\n");
    }
    s
}
