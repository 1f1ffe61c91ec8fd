#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use ratediff::codec::{Codec, CodecConfig};
use ratediff::dataset::{EventClass, SoundEvent};
use ratediff::rng::{normal_f32, rng_for};
use ratediff::train::{ExperimentConfig, LatentItem, TrainMode};
use ratediff::unet::UNetConfig;

pub const LATENT: [usize; 3] = [4, 26, 16];

/// Class-structured fake latents: a per-class spatial pattern plus noise.
pub fn latents(per_class: usize, rates: &[u32], seed: u64) -> Vec<LatentItem> {
    let n: usize = LATENT.iter().product();
    let mut out = Vec::new();
    for &class in &EventClass::ALL {
        for i in 0..per_class {
            let ev = SoundEvent::sample(class, seed * 1000 + (class.index() * per_class + i) as u64);
            for &rate in rates {
                let mut rng = rng_for(&[seed, class.index() as u64, i as u64, rate as u64]);
                let noise = normal_f32(&mut rng, n);
                let v: Vec<f32> = (0..n)
                    .map(|k| {
                        let phase = (k % 16) as f32 * 0.4 + class.index() as f32;
                        1.5 * phase.sin() + 0.3 * noise[k]
                    })
                    .collect();
                out.push(LatentItem {
                    z: Tensor::from_vec(v, LATENT.as_slice(), &Device::Cpu).unwrap(),
                    caption: ev.caption.clone(),
                    class,
                    rate_hz: rate,
                });
            }
        }
    }
    out
}

pub fn tiny_config(mode: TrainMode, rates: &[u32], steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        mode,
        rate_set: rates.to_vec(),
        max_steps: Some(steps),
        pretrain_max_steps: Some(steps),
        batch_size: 4,
        lr: 1e-3,
        eval_every: 3,
        unet: UNetConfig {
            widths: vec![16, 32],
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.sampler.num_steps = 4;
    cfg
}

pub fn codec() -> Codec {
    Codec::new(CodecConfig::default(), DType::F32, 0).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f32> {
    t.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
}
