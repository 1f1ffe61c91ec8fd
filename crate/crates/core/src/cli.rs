//! Command-line entry point: `ratediff <subcommand> ...`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::codec::{train_codec, Codec, CodecTrainConfig};
use crate::dataset::{build_corpus, load_mels, CorpusConfig, DatasetManifest, Split};
use crate::diffusion::SamplerConfig;
use crate::dsp::STANDARD_RATES;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, train_classifier, Classifier, ClassifierConfig};
use crate::nn::file_sha256;
use crate::repro::{repro_tables, ReproConfig, METRICS_FILE, TABLES_FILE};
use crate::rng::{deterministic_mode, enable_deterministic_mode};
use crate::train::{encode_items, generate, pretrain_then_finetune, train_ldm, ExperimentConfig, Pipeline, Start, TrainMode};

pub const RUN_MANIFEST: &str = "run_manifest.jsonl";

#[derive(Parser, Debug)]
#[command(name = "ratediff", version, about = "Sampling-rate-conditioned latent diffusion for text-to-audio")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Fixed,
    Multi,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the captioned synthetic corpus at every rate.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, value_delimiter = ',', default_values_t = STANDARD_RATES.to_vec())]
        rates: Vec<u32>,
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the mel VAE on the training split.
    TrainVae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON codec training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the evaluation classifier (fails below the accuracy gate).
    TrainClassifier {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the latent diffusion model at one rate or jointly over several.
    TrainLdm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Multi)]
        mode: ModeArg,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<u32>>,
        /// JSON experiment config; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Warm start from another run's checkpoint.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue from a `last.safetensors` checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fixed-rate pretraining on a low-rate corpus, then multi-rate finetuning.
    PretrainFinetune {
        /// Finetune corpus.
        #[arg(long)]
        data: PathBuf,
        /// Pretrain corpus (only clips at the pretrain rate are used).
        #[arg(long)]
        pretrain_data: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16_000)]
        pretrain_rate: u32,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<u32>>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate one clip as a WAV file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        rate: u32,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 3.0)]
        guidance: f64,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-rate FD, IS, KL and prompt accuracy of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<u32>>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 3.0)]
        guidance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the full experiment grid and write comparison tables.
    ReproTables {
        #[arg(long)]
        out: PathBuf,
        /// JSON grid config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the seconds-scale smoke grid.
        #[arg(long, conflicts_with = "config")]
        micro: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// One line of `run_manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub sha256: Vec<String>,
}

/// Appends `record` to the manifest in `dir` unless an identical line is present.
pub fn append_run(dir: &Path, record: &RunRecord) -> Result<()> {
    for a in &record.artifacts {
        if !Path::new(a).exists() {
            return Err(Error::invalid(format!("run manifest artifact {a} does not exist")));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RUN_MANIFEST);
    let line = serde_json::to_string(record)?;
    if let Ok(existing) = std::fs::read_to_string(&path) {
        if existing.lines().any(|l| l == line) {
            return Ok(());
        }
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

fn record(command: &str, config_hash: Option<String>, seed: u64, artifacts: &[PathBuf]) -> Result<RunRecord> {
    Ok(RunRecord {
        command: command.to_string(),
        config_hash,
        seed,
        artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
        sha256: artifacts.iter().map(|p| file_sha256(p)).collect::<Result<_>>()?,
    })
}

fn experiment(config: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn check_rate(rate: u32) -> Result<()> {
    if STANDARD_RATES.contains(&rate) {
        Ok(())
    } else {
        Err(Error::UnknownRate {
            rate_hz: rate,
            valid: STANDARD_RATES.to_vec(),
        })
    }
}

/// Executes a parsed command, returning a human-readable summary.
pub fn execute(cmd: Command) -> Result<String> {
    match cmd {
        Command::GenData {
            out,
            per_class,
            rates,
            duration,
            seed,
        } => {
            rates.iter().try_for_each(|&r| check_rate(r))?;
            let cfg = CorpusConfig {
                duration_s: duration,
                ..CorpusConfig::new(per_class, &rates)
            };
            let m = build_corpus(&cfg, seed, &out)?;
            let manifest = out.join(crate::dataset::MANIFEST_FILE);
            append_run(&out, &record("gen-data", None, seed, &[manifest])?)?;
            Ok(format!("wrote {} clips to {}", m.entries.len(), out.display()))
        }
        Command::TrainVae {
            data,
            out,
            config,
            steps,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => serde_json::from_str::<CodecTrainConfig>(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
                    .map_err(|e| Error::Config(e.to_string()))?,
                None => CodecTrainConfig::default(),
            };
            cfg.seed = seed;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let m = DatasetManifest::load(&data)?;
            let train = load_mels(&m, Some(Split::Train), None)?;
            let valid = load_mels(&m, Some(Split::Valid), None)?;
            let (codec, log) = train_codec(&train, &valid, &cfg)?;
            let path = out.join("codec.safetensors");
            codec.save(&path, Some(&log))?;
            let hash = crate::nn::sha256_hex(serde_json::to_string(&cfg)?.as_bytes());
            append_run(&out, &record("train-vae", Some(hash), seed, &[path.clone()])?)?;
            Ok(format!("codec best validation loss {:.5} -> {}", log.best_valid, path.display()))
        }
        Command::TrainClassifier { data, out, steps, seed } => {
            let mut cfg = ClassifierConfig {
                seed,
                ..Default::default()
            };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let m = DatasetManifest::load(&data)?;
            let mels = |s| load_mels(&m, Some(s), Some(&[crate::metrics::CLASSIFIER_RATE]));
            let clf = train_classifier(&mels(Split::Train)?, &mels(Split::Valid)?, &mels(Split::Test)?, &cfg)?;
            let path = out.join("classifier.safetensors");
            clf.save(&path)?;
            append_run(&out, &record("train-classifier", None, seed, &[path.clone()])?)?;
            Ok(format!("classifier held-out accuracy {:.3} -> {}", clf.accuracy, path.display()))
        }
        Command::TrainLdm {
            data,
            codec,
            out,
            mode,
            rates,
            config,
            init,
            resume,
            max_steps,
            seed,
        } => {
            let mut cfg = experiment(&config)?;
            cfg.mode = match mode {
                ModeArg::Fixed => TrainMode::FixedRate,
                ModeArg::Multi => TrainMode::MultiRate,
            };
            cfg.pretrain_rate_hz = None;
            if let Some(r) = rates {
                cfg.rate_set = r;
            }
            if max_steps.is_some() {
                cfg.max_steps = max_steps;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let codec = Codec::load(&codec)?;
            let m = DatasetManifest::load(&data)?;
            let train = encode_items(&codec, &load_mels(&m, Some(Split::Train), Some(&cfg.rate_set))?)?;
            let valid = encode_items(&codec, &load_mels(&m, Some(Split::Valid), Some(&cfg.rate_set))?)?;
            let start = match (init, resume) {
                (Some(p), _) => Start::From(p),
                (None, Some(p)) => Start::Resume(p),
                (None, None) => Start::Fresh,
            };
            let o = train_ldm(&cfg, &train, &valid, &codec, &start, &out)?;
            append_run(&out, &record("train-ldm", Some(cfg.config_hash()), cfg.seed, &[o.best_path.clone()])?)?;
            Ok(format!("best validation loss {:.5} at step {} -> {}", o.log.best_valid, o.log.best_step, o.best_path.display()))
        }
        Command::PretrainFinetune {
            data,
            pretrain_data,
            codec,
            out,
            pretrain_rate,
            rates,
            config,
            seed,
        } => {
            let mut cfg = experiment(&config)?;
            cfg.mode = TrainMode::PretrainThenFinetune;
            cfg.pretrain_rate_hz = Some(pretrain_rate);
            if let Some(r) = rates {
                cfg.rate_set = r;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let codec = Codec::load(&codec)?;
            let m = DatasetManifest::load(&data)?;
            let pm = DatasetManifest::load(&pretrain_data)?;
            let enc = |man: &DatasetManifest, s, r: &[u32]| encode_items(&codec, &load_mels(man, Some(s), Some(r))?);
            let pre = [pretrain_rate];
            let (pt, pv) = (enc(&pm, Split::Train, &pre)?, enc(&pm, Split::Valid, &pre)?);
            let (ft, fv) = (enc(&m, Split::Train, &cfg.rate_set)?, enc(&m, Split::Valid, &cfg.rate_set)?);
            let o = pretrain_then_finetune(&cfg, (&pt, &pv), (&ft, &fv), &codec, &out)?;
            let arts = [o.pretrain.best_path.clone(), o.finetune.best_path.clone()];
            append_run(&out, &record("pretrain-finetune", Some(cfg.config_hash()), cfg.seed, &arts)?)?;
            Ok(format!(
                "pretrain -> {}\nfinetune -> {}",
                o.pretrain.best_path.display(),
                o.finetune.best_path.display()
            ))
        }
        Command::Sample {
            checkpoint,
            prompt,
            rate,
            steps,
            guidance,
            eta,
            seed,
            out,
        } => {
            check_rate(rate)?;
            let sampler = SamplerConfig {
                num_steps: steps,
                guidance_scale: guidance,
                eta,
                seed,
                ..Default::default()
            };
            let w = generate(&checkpoint, &prompt, rate, &sampler, &out)?;
            let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            append_run(dir, &record("sample", None, seed, &[out.clone()])?)?;
            Ok(format!("wrote {} samples at {} Hz to {}", w.len(), w.rate_hz, out.display()))
        }
        Command::Evaluate {
            checkpoint,
            classifier,
            data,
            out,
            rates,
            steps,
            guidance,
            seed,
        } => {
            let p = Pipeline::load(&checkpoint)?;
            let clf = Classifier::load(&classifier)?;
            let m = DatasetManifest::load(&data)?;
            let rates = rates.unwrap_or_else(|| p.model.config.rate_set.clone());
            let sampler = SamplerConfig {
                num_steps: steps,
                guidance_scale: guidance,
                seed,
                ..Default::default()
            };
            let report = evaluate_model(&p, &clf, &m, &sampler, &rates)?;
            let path = out.join("metrics.json");
            report.write_json(&path)?;
            let table = report.table("model");
            std::fs::write(out.join("metrics.txt"), &table).map_err(|e| Error::io(&out, e))?;
            append_run(&out, &record("evaluate", Some(report.config_hash.clone()), seed, &[path])?)?;
            Ok(table)
        }
        Command::ReproTables { out, config, micro, seed } => {
            let cfg = match (config, micro) {
                (Some(p), _) => ReproConfig::load(&p)?,
                (None, true) => ReproConfig::micro(seed),
                (None, false) => ReproConfig {
                    seed,
                    ..Default::default()
                },
            };
            let o = repro_tables(&cfg, &out)?;
            let arts = [out.join(METRICS_FILE), out.join(TABLES_FILE)];
            append_run(&out, &record("repro-tables", Some(cfg.config_hash()), cfg.seed, &arts)?)?;
            Ok(o.tables)
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code: 0 ok, 1 runtime failure, 2 usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if deterministic_mode() {
        enable_deterministic_mode();
    }
    match execute(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            1
        }
    }
}
