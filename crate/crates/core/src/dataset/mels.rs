use rayon::prelude::*;

use super::{DatasetManifest, EventClass, Split};
use crate::dsp::{extract_mel, MelSpectrogram, RateConfig};
use crate::error::Result;

/// A corpus clip's log-mel at its own rate's configuration, with its labels.
#[derive(Clone, Debug)]
pub struct MelItem {
    pub mel: MelSpectrogram,
    pub class: EventClass,
    pub caption: String,
    pub rate_hz: u32,
    pub clip: usize,
}

/// Loads and featurizes every entry of `split` whose rate is in `rates`
/// (all rates when `None`), in manifest order.
pub fn load_mels(manifest: &DatasetManifest, split: Option<Split>, rates: Option<&[u32]>) -> Result<Vec<MelItem>> {
    let entries: Vec<_> = manifest
        .select(split, None)
        .into_iter()
        .filter(|e| rates.is_none_or(|r| r.contains(&e.rate_hz)))
        .collect();
    entries
        .par_iter()
        .map(|e| {
            let w = manifest.audio(e)?;
            let cfg = RateConfig::standard(e.rate_hz)?;
            Ok(MelItem {
                mel: extract_mel(&w, &cfg)?,
                class: e.class,
                caption: e.caption.clone(),
                rate_hz: e.rate_hz,
                clip: e.clip,
            })
        })
        .collect()
}
