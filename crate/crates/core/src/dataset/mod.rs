//! Procedural captioned sound-event corpus rendered at several sampling rates.

mod corpus;
mod events;
mod mels;

pub use corpus::{build_corpus, render_at, CorpusConfig, DatasetManifest, ManifestEntry, Split, MANIFEST_FILE, REFERENCE_RATE};
pub use events::{invert_caption, synth_event, EventClass, SoundEvent, PEAK_LEVEL};
pub use mels::{load_mels, MelItem};
