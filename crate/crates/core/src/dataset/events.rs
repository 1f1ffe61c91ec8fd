use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::rng::{normal_f64, rng_for};

pub const PEAK_LEVEL: f32 = 0.9;
const FADE_S: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventClass {
    LowTone,
    HighTone,
    RisingChirp,
    FallingChirp,
    NoiseBurst,
    AmTone,
    ClickTrain,
    UltraTone,
}

impl EventClass {
    pub const ALL: [EventClass; 8] = [
        EventClass::LowTone,
        EventClass::HighTone,
        EventClass::RisingChirp,
        EventClass::FallingChirp,
        EventClass::NoiseBurst,
        EventClass::AmTone,
        EventClass::ClickTrain,
        EventClass::UltraTone,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EventClass::LowTone => "low_tone",
            EventClass::HighTone => "high_tone",
            EventClass::RisingChirp => "rising_chirp",
            EventClass::FallingChirp => "falling_chirp",
            EventClass::NoiseBurst => "noise_burst",
            EventClass::AmTone => "am_tone",
            EventClass::ClickTrain => "click_train",
            EventClass::UltraTone => "ultra_tone",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn templates(self) -> &'static [&'static str] {
        match self {
            EventClass::LowTone => &["a low tone", "a deep steady hum", "a low pitched drone", "a soft bass note"],
            EventClass::HighTone => &["a high tone", "a high pitched beep", "a steady whistle", "a bright sine note"],
            EventClass::RisingChirp => &["a rising chirp", "a sweep going up", "an upward pitch glide"],
            EventClass::FallingChirp => &["a falling chirp", "a sweep going down", "a downward pitch glide"],
            EventClass::NoiseBurst => &["a burst of noise", "a short hiss", "a blast of static"],
            EventClass::AmTone => &["a wobbling tone", "a pulsating tremolo sound", "a warbling note"],
            EventClass::ClickTrain => &["a train of clicks", "rapid ticking", "a series of clicks"],
            EventClass::UltraTone => &["an ultrasonic tone", "a very high shimmering tone", "an extremely high pitched whine"],
        }
    }
}

impl std::fmt::Display for EventClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Recovers the event class of a caption produced by the templates.
pub fn invert_caption(caption: &str) -> Option<EventClass> {
    let c = caption.trim().to_lowercase();
    EventClass::ALL
        .into_iter()
        .find(|class| class.templates().iter().any(|t| *t == c))
}

/// A parameterized sound event plus its caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundEvent {
    pub class: EventClass,
    pub params: BTreeMap<String, f64>,
    pub caption: String,
    pub seed: u64,
}

impl SoundEvent {
    /// Draws class-specific parameters and a caption template from `seed`.
    pub fn sample(class: EventClass, seed: u64) -> Self {
        let mut rng = rng_for(&[seed, 0xE7E7]);
        let mut p = BTreeMap::new();
        let mut put = |k: &str, lo: f64, hi: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            p.insert(k.to_string(), rng.random_range(lo..hi));
        };
        match class {
            EventClass::LowTone => put("freq_hz", 150.0, 400.0, &mut rng),
            EventClass::HighTone => put("freq_hz", 1500.0, 3000.0, &mut rng),
            EventClass::RisingChirp => {
                put("start_hz", 300.0, 600.0, &mut rng);
                put("end_hz", 2500.0, 4000.0, &mut rng);
            }
            EventClass::FallingChirp => {
                put("start_hz", 2500.0, 4000.0, &mut rng);
                put("end_hz", 300.0, 600.0, &mut rng);
            }
            EventClass::NoiseBurst => {
                put("onset", 0.05, 0.3, &mut rng);
                put("length", 0.3, 0.6, &mut rng);
            }
            EventClass::AmTone => {
                put("freq_hz", 600.0, 1000.0, &mut rng);
                put("mod_hz", 3.0, 8.0, &mut rng);
            }
            EventClass::ClickTrain => put("click_hz", 5.0, 15.0, &mut rng),
            EventClass::UltraTone => put("freq_hz", 9000.0, 11_000.0, &mut rng),
        }
        let templates = class.templates();
        let caption = templates[rng.random_range(0..templates.len())].to_string();
        Self {
            class,
            params: p,
            caption,
            seed,
        }
    }

    fn param(&self, key: &str) -> Result<f64> {
        self.params
            .get(key)
            .copied()
            .ok_or_else(|| Error::invalid(format!("{} event is missing parameter {key}", self.class)))
    }

    /// Highest deterministic frequency component, if the event has one.
    pub fn max_frequency_hz(&self) -> Option<f64> {
        match self.class {
            EventClass::LowTone | EventClass::HighTone | EventClass::UltraTone => self.params.get("freq_hz").copied(),
            EventClass::RisingChirp | EventClass::FallingChirp => {
                Some(self.params.get("start_hz")?.max(*self.params.get("end_hz")?))
            }
            // carrier plus modulation sidebands
            EventClass::AmTone => Some(self.params.get("freq_hz")? + self.params.get("mod_hz")?),
            EventClass::NoiseBurst | EventClass::ClickTrain => None,
        }
    }
}

fn fade(i: usize, n: usize, rate: f64) -> f64 {
    let k = (FADE_S * rate).max(1.0);
    let edge = (i as f64).min((n - 1 - i) as f64);
    if edge >= k {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * edge / k).cos()
    }
}

/// Renders `e` at `rate_hz`, peak-normalized to [`PEAK_LEVEL`].
pub fn synth_event(e: &SoundEvent, rate_hz: u32, duration_s: f64) -> Result<Waveform> {
    if !(duration_s > 0.0) {
        return Err(Error::invalid(format!("duration must be positive, got {duration_s}")));
    }
    if rate_hz == 0 {
        return Err(Error::invalid("rate_hz must be positive"));
    }
    let nyquist = rate_hz as f64 / 2.0;
    if let Some(f) = e.max_frequency_hz() {
        if f >= nyquist {
            return Err(Error::invalid(format!(
                "{} at {f:.0} Hz is not representable at {rate_hz} Hz (Nyquist {nyquist:.0} Hz)",
                e.class
            )));
        }
    }
    let sr = rate_hz as f64;
    let n = (duration_s * sr).round() as usize;
    if n == 0 {
        return Err(Error::invalid("duration shorter than one sample"));
    }
    let t = |i: usize| i as f64 / sr;
    let samples: Vec<f64> = match e.class {
        EventClass::LowTone | EventClass::HighTone | EventClass::UltraTone => {
            let f = e.param("freq_hz")?;
            (0..n).map(|i| (TAU * f * t(i)).sin() * fade(i, n, sr)).collect()
        }
        EventClass::RisingChirp | EventClass::FallingChirp => {
            let (f0, f1) = (e.param("start_hz")?, e.param("end_hz")?);
            let k = (f1 - f0) / duration_s;
            (0..n)
                .map(|i| {
                    let ti = t(i);
                    (TAU * (f0 * ti + 0.5 * k * ti * ti)).sin() * fade(i, n, sr)
                })
                .collect()
        }
        EventClass::AmTone => {
            let (f, m) = (e.param("freq_hz")?, e.param("mod_hz")?);
            (0..n)
                .map(|i| {
                    let ti = t(i);
                    let env = 0.5 * (1.0 + 0.9 * (TAU * m * ti).sin());
                    env * (TAU * f * ti).sin() * fade(i, n, sr)
                })
                .collect()
        }
        EventClass::NoiseBurst => {
            let (onset, length) = (e.param("onset")?, e.param("length")?);
            let mut rng = rng_for(&[e.seed, rate_hz as u64, 0x9015E]);
            let noise = normal_f64(&mut rng, n);
            let start = (onset * n as f64) as usize;
            let len = ((length * n as f64) as usize).max(1);
            (0..n)
                .map(|i| {
                    if i < start || i >= start + len {
                        0.0
                    } else {
                        noise[i] * fade(i - start, len, sr)
                    }
                })
                .collect()
        }
        EventClass::ClickTrain => {
            let rate = e.param("click_hz")?;
            let tau = 0.0005 * sr;
            let period = sr / rate;
            (0..n)
                .map(|i| {
                    let phase = (i as f64) % period;
                    (-phase / tau).exp()
                })
                .collect()
        }
    };
    let mut w = Waveform::new(samples.into_iter().map(|v| v as f32).collect(), rate_hz)?;
    w.peak_normalize(PEAK_LEVEL);
    Ok(w)
}
