use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::events::{synth_event, EventClass, SoundEvent};
use crate::dsp::wav::{read_wav, write_wav};
use crate::dsp::{resample, Waveform};
use crate::error::{Error, Result};
use crate::rng::{deterministic_mode, mix_seed, rng_for};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Rate used to render events that cannot be represented at a lower target rate.
pub const REFERENCE_RATE: u32 = 48_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub classes: Vec<EventClass>,
    pub per_class: usize,
    pub rates: Vec<u32>,
    pub duration_s: f64,
}

impl CorpusConfig {
    pub fn new(per_class: usize, rates: &[u32]) -> Self {
        Self {
            classes: EventClass::ALL.to_vec(),
            per_class,
            rates: rates.to_vec(),
            duration_s: 1.0,
        }
    }
}

/// One clip at one rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub caption: String,
    pub class: EventClass,
    pub rate_hz: u32,
    pub split: Split,
    pub seed: u64,
    /// Index of the underlying event; shared by all renderings of it.
    pub clip: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        let mut seed = 0;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line)
                .map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))?;
            seed = record.corpus_seed;
            entries.push(record.entry);
        }
        Ok(Self {
            entries,
            seed,
            root: dir.to_path_buf(),
        })
    }

    pub fn write(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for entry in &self.entries {
            let rec = RecordRef {
                entry,
                corpus_seed: self.seed,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn select(&self, split: Option<Split>, rate_hz: Option<u32>) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s) && rate_hz.is_none_or(|r| e.rate_hz == r))
            .collect()
    }

    pub fn class_histogram(&self) -> BTreeMap<EventClass, usize> {
        let mut h = BTreeMap::new();
        for e in &self.entries {
            *h.entry(e.class).or_insert(0) += 1;
        }
        h
    }

    pub fn rates(&self) -> Vec<u32> {
        let mut r: Vec<u32> = self.entries.iter().map(|e| e.rate_hz).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    pub fn audio(&self, entry: &ManifestEntry) -> Result<Waveform> {
        read_wav(self.root.join(&entry.path))
    }
}

#[derive(Deserialize)]
struct Record {
    #[serde(flatten)]
    entry: ManifestEntry,
    corpus_seed: u64,
}

#[derive(Serialize)]
struct RecordRef<'a> {
    #[serde(flatten)]
    entry: &'a ManifestEntry,
    corpus_seed: u64,
}

/// Per-class 80/10/10 split of `n` clip indices.
fn split_assignment(n: usize, seed: u64, class: EventClass) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(&[seed, class.index() as u64, 0x5711]));
    let n_valid = (n as f64 * 0.1).round() as usize;
    let n_test = (n as f64 * 0.1).round() as usize;
    let n_train = n.saturating_sub(n_valid + n_test);
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    out
}

/// Renders `event` at `rate_hz`. Events whose content lies above the
/// target Nyquist frequency are rendered at [`REFERENCE_RATE`] and
/// band-limited down, which leaves (near) silence.
pub fn render_at(event: &SoundEvent, rate_hz: u32, duration_s: f64) -> Result<Waveform> {
    let representable = event.max_frequency_hz().is_none_or(|f| f < rate_hz as f64 / 2.0);
    if representable {
        synth_event(event, rate_hz, duration_s)
    } else {
        let hi = synth_event(event, REFERENCE_RATE.max(rate_hz), duration_s)?;
        resample(&hi, rate_hz)
    }
}

/// Generates every clip of `cfg` under `out_dir` and writes the manifest.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if cfg.per_class == 0 {
        return Err(Error::invalid("per_class must be >= 1"));
    }
    if cfg.classes.is_empty() || cfg.rates.is_empty() {
        return Err(Error::invalid("corpus needs at least one class and one rate"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut jobs = Vec::new();
    for (ci, &class) in cfg.classes.iter().enumerate() {
        let splits = split_assignment(cfg.per_class, seed, class);
        for (i, &split) in splits.iter().enumerate() {
            let clip = ci * cfg.per_class + i;
            let clip_seed = mix_seed(&[seed, clip as u64]);
            let event = SoundEvent::sample(class, clip_seed);
            for &rate in &cfg.rates {
                let path = format!("clips/{rate}/{}_{clip:05}.wav", class.name());
                jobs.push((
                    event.clone(),
                    ManifestEntry {
                        path,
                        caption: event.caption.clone(),
                        class,
                        rate_hz: rate,
                        split,
                        seed: clip_seed,
                        clip,
                    },
                ));
            }
        }
    }

    let render = |(event, entry): &(SoundEvent, ManifestEntry)| -> Result<()> {
        let w = render_at(event, entry.rate_hz, cfg.duration_s)?;
        write_wav(out_dir.join(&entry.path), &w)
    };
    if deterministic_mode() {
        jobs.iter().try_for_each(render)?;
    } else {
        jobs.par_iter().try_for_each(render)?;
    }

    let manifest = DatasetManifest {
        entries: jobs.into_iter().map(|(_, e)| e).collect(),
        seed,
        root: out_dir.to_path_buf(),
    };
    manifest.write()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_proportions() {
        let s = split_assignment(50, 3, EventClass::LowTone);
        let count = |k| s.iter().filter(|&&x| x == k).count();
        assert_eq!((count(Split::Train), count(Split::Valid), count(Split::Test)), (40, 5, 5));
        assert_eq!(split_assignment(1, 3, EventClass::LowTone), vec![Split::Train]);
    }

    #[test]
    fn small_corpus_counts_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            duration_s: 0.1,
            ..CorpusConfig::new(2, &[16_000, 48_000])
        };
        let m = build_corpus(&cfg, 11, a.path()).unwrap();
        assert_eq!(m.entries.len(), 8 * 2 * 2);
        build_corpus(&cfg, 11, b.path()).unwrap();
        let ma = std::fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let mb = std::fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, mb);
        let loaded = DatasetManifest::load(a.path()).unwrap();
        assert_eq!(loaded.entries, m.entries);
        assert_eq!(loaded.seed, 11);
        for e in &m.entries {
            assert!(a.path().join(&e.path).exists());
        }
    }

    #[test]
    fn ultra_tone_below_its_nyquist_is_silent() {
        let e = SoundEvent::sample(EventClass::UltraTone, 5);
        let w = render_at(&e, 16_000, 0.5).unwrap();
        assert_eq!(w.len(), 8000);
        assert!(w.peak() < 1e-3, "peak {}", w.peak());
    }

    #[test]
    fn unwritable_output_dir() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("not_a_dir");
        std::fs::write(&file, b"x").unwrap();
        let cfg = CorpusConfig::new(1, &[16_000]);
        assert!(build_corpus(&cfg, 1, file.join("sub")).is_err());
    }
}
