mod common;

use std::collections::BTreeSet;

use candle_core::{DType, Tensor};
use common::{codec, latents, tiny_config, to_vec};
use ratediff::conditioning::ConditionBatch;
use ratediff::diffusion::gaussian;
use ratediff::dsp::wav::read_wav;
use ratediff::nn::{file_sha256, Checkpoint};
use ratediff::train::*;
use ratediff::Error;

const ALL: [u32; 4] = [16_000, 24_000, 32_000, 48_000];

#[test]
fn fixed_rate_batches_stay_at_one_rate() {
    let data = latents(3, &[16_000], 1);
    let cfg = tiny_config(TrainMode::FixedRate, &[16_000], 10);
    let epoch = data.len().div_ceil(cfg.batch_size);
    for step in 1..=epoch {
        let (idx, _, _) = step_plan(&cfg, data.len(), step);
        assert!(idx.iter().all(|&i| data[i].rate_hz == 16_000));
    }
    let mixed = latents(1, &[16_000, 24_000], 1);
    let err = train_ldm(&cfg, &mixed, &[], &codec(), &Start::Fresh, tempfile::tempdir().unwrap().path());
    assert!(matches!(err, Err(Error::UnknownRate { rate_hz: 24_000, .. })));
}

#[test]
fn multi_rate_batches_cover_every_rate() {
    let data = latents(5, &ALL, 2);
    let cfg = ExperimentConfig::default();
    let mut seen = BTreeSet::new();
    for step in 1..=100 {
        let (idx, ts, _) = step_plan(&cfg, data.len(), step);
        assert!(ts.iter().all(|&t| (1..=1000).contains(&t)));
        seen.extend(idx.iter().map(|&i| data[i].rate_hz));
    }
    assert_eq!(seen.into_iter().collect::<Vec<_>>(), ALL.to_vec());
}

#[test]
fn dropped_conditions_equal_null_condition() {
    let data = latents(1, &ALL, 3);
    let cfg = ExperimentConfig {
        cond_dropout_prob: 0.5,
        ..tiny_config(TrainMode::MultiRate, &ALL, 1)
    };
    let model = LdmModel::new(cfg.clone(), DType::F32).unwrap();
    let items: Vec<&LatentItem> = data.iter().take(8).collect();
    let drop: Vec<bool> = (0..8).map(|i| i % 2 == 0).collect();
    let conds = batch_conditions(&model, &items, &drop).unwrap();
    for ((c, it), d) in conds.iter().zip(&items).zip(&drop) {
        let full = model.conditioner.condition(&it.caption, it.rate_hz).unwrap();
        if *d {
            let null = model.conditioner.null_condition(it.rate_hz).unwrap();
            let blank = model.conditioner.condition(" ", it.rate_hz).unwrap();
            assert!(c.is_null);
            assert_eq!(to_vec(&c.sequence), to_vec(&null.sequence));
            assert_eq!(to_vec(&c.sequence), to_vec(&blank.sequence));
            assert_eq!(to_vec(&c.rate_row().unwrap()), to_vec(&full.rate_row().unwrap()));
        } else {
            assert_eq!(to_vec(&c.sequence), to_vec(&full.sequence));
        }
    }
    let drops: usize = (1..=50).map(|s| step_plan(&cfg, 100, s).2.iter().filter(|&&d| d).count()).sum();
    assert!((60..=140).contains(&drops), "{drops} drops in 200 draws at p = 0.5");
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = latents(1, &ALL, 4);
    let cfg = tiny_config(TrainMode::MultiRate, &ALL, 2);
    let out = train_ldm(&cfg, &data, &data, &codec(), &Start::Fresh, dir.path()).unwrap();
    let loaded = Pipeline::load(&out.best_path).unwrap();
    let x = gaussian(&[2, 4, 26, 16], &[9], DType::F32, &candle_core::Device::Cpu).unwrap();
    let c1 = out.model.conditioner.condition("a dog barks", 32_000).unwrap();
    let c2 = loaded.model.conditioner.condition("a dog barks", 32_000).unwrap();
    let a = out.model.unet.forward(&x, &[10, 500], &ConditionBatch::new(&[&c1, &c1]).unwrap()).unwrap();
    let b = loaded.model.unet.forward(&x, &[10, 500], &ConditionBatch::new(&[&c2, &c2]).unwrap()).unwrap();
    assert_eq!(to_vec(&a), to_vec(&b));
    assert_eq!(loaded.meta.config, cfg);
    assert_eq!(loaded.meta.seed, cfg.seed);
}

#[test]
fn identical_runs_give_identical_loss_curves() {
    let data = latents(1, &ALL, 5);
    let cfg = tiny_config(TrainMode::MultiRate, &ALL, 4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train_ldm(&cfg, &data, &data, &codec(), &Start::Fresh, a.path()).unwrap();
    let rb = train_ldm(&cfg, &data, &data, &codec(), &Start::Fresh, b.path()).unwrap();
    assert_eq!(ra.log, rb.log);
    assert_eq!(ra.log.train.len(), 4);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let data = latents(1, &ALL, 6);
    let full = tiny_config(TrainMode::MultiRate, &ALL, 6);
    let half = ExperimentConfig {
        max_steps: Some(3),
        ..full.clone()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train_ldm(&full, &data, &data, &codec(), &Start::Fresh, a.path()).unwrap();
    let first = train_ldm(&half, &data, &data, &codec(), &Start::Fresh, b.path()).unwrap();
    let rb = train_ldm(&full, &data, &data, &codec(), &Start::Resume(first.last_path.clone()), b.path()).unwrap();
    assert_eq!(ra.log.train, rb.log.train);
    let la = Checkpoint::load(&ra.last_path).unwrap();
    let lb = Checkpoint::load(&rb.last_path).unwrap();
    assert_eq!(la.tensors.keys().collect::<Vec<_>>(), lb.tensors.keys().collect::<Vec<_>>());
    for (k, t) in &la.tensors {
        assert_eq!(to_vec(t), to_vec(&lb.tensors[k]), "{k}");
    }
}

#[test]
fn non_finite_loss_aborts_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = latents(1, &[16_000], 7);
    let bad = Tensor::full(f32::NAN, common::LATENT.as_slice(), &candle_core::Device::Cpu).unwrap();
    for it in data.iter_mut() {
        it.z = bad.clone();
    }
    let valid = latents(1, &[16_000], 8);
    let cfg = tiny_config(TrainMode::FixedRate, &[16_000], 5);
    match train_ldm(&cfg, &data, &valid, &codec(), &Start::Fresh, dir.path()) {
        Err(Error::Diverged { step: 1, .. }) => {}
        Err(e) => panic!("expected divergence, got {e}"),
        Ok(_) => panic!("expected divergence"),
    }
    let p = Pipeline::load(&dir.path().join(BEST_FILE)).unwrap();
    assert!(p.model.params().all_finite().unwrap());
}

#[test]
fn warm_start_copies_weights_and_fresh_rate_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = latents(2, &[16_000], 9);
    let p_cfg = tiny_config(TrainMode::FixedRate, &[16_000], 3);
    let parent = train_ldm(&p_cfg, &data, &data, &codec(), &Start::Fresh, dir.path()).unwrap();
    let f_cfg = tiny_config(TrainMode::MultiRate, &ALL, 1);
    let fresh = LdmModel::new(f_cfg.clone(), DType::F32).unwrap();
    let warm = LdmModel::new(f_cfg, DType::F32).unwrap();
    let ck = Checkpoint::load(&parent.best_path).unwrap();
    let carried = warm.warm_start(&ck.with_prefix(LDM_PREFIX), &[16_000]).unwrap();
    assert_eq!(carried, vec![16_000]);
    let pp = parent.model.params().snapshot(DType::F32).unwrap();
    let wp = warm.params().snapshot(DType::F32).unwrap();
    let fp = fresh.params().snapshot(DType::F32).unwrap();
    for (k, t) in &wp {
        if k == "cond.rate_table" {
            assert_eq!(to_vec(&t.get(0).unwrap()), to_vec(&pp[k].get(0).unwrap()));
            for r in 1..4 {
                assert_eq!(to_vec(&t.get(r).unwrap()), to_vec(&fp[k].get(r).unwrap()));
            }
        } else {
            assert_eq!(to_vec(t), to_vec(&pp[k]), "{k}");
        }
    }
}

#[test]
fn warm_start_lowers_step_zero_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let train = latents(4, &[16_000], 10);
    let valid = latents(1, &[16_000], 11);
    let p_cfg = ExperimentConfig {
        lr: 2e-3,
        eval_every: 20,
        ..tiny_config(TrainMode::FixedRate, &[16_000], 40)
    };
    let parent = train_ldm(&p_cfg, &train, &valid, &codec(), &Start::Fresh, dir.path()).unwrap();
    let f_cfg = tiny_config(TrainMode::MultiRate, &ALL, 1);
    let fresh = LdmModel::new(f_cfg.clone(), DType::F32).unwrap();
    let warm = LdmModel::new(f_cfg, DType::F32).unwrap();
    let ck = Checkpoint::load(&parent.best_path).unwrap();
    warm.warm_start(&ck.with_prefix(LDM_PREFIX), &[16_000]).unwrap();
    let lf = validation_loss(&fresh, &valid, 4).unwrap();
    let lw = validation_loss(&warm, &valid, 4).unwrap();
    assert!(lw < lf, "warm {lw} vs fresh {lf}");
}

#[test]
fn pretrain_then_finetune_micro_run() {
    let dir = tempfile::tempdir().unwrap();
    let pre = latents(2, &[16_000], 12);
    let fine = latents(1, &ALL, 13);
    let cfg = ExperimentConfig {
        mode: TrainMode::PretrainThenFinetune,
        pretrain_rate_hz: Some(16_000),
        ..tiny_config(TrainMode::MultiRate, &ALL, 2)
    };
    let o = pretrain_then_finetune(&cfg, (&pre, &pre), (&fine, &fine), &codec(), dir.path()).unwrap();
    let p1 = Pipeline::load(&o.pretrain.best_path).unwrap();
    let p2 = Pipeline::load(&o.finetune.best_path).unwrap();
    assert_eq!(p1.meta.rate_set, vec![16_000]);
    assert_eq!(p2.meta.rate_set, ALL.to_vec());
    assert_eq!(p2.meta.parent_sha256.as_deref(), Some(file_sha256(&o.pretrain.best_path).unwrap().as_str()));
    assert!(o.pretrain.best_path.starts_with(dir.path().join("pretrain")));
    assert!(o.finetune.best_path.starts_with(dir.path().join("finetune")));
    let bad = ExperimentConfig {
        pretrain_rate_hz: None,
        ..cfg
    };
    assert!(pretrain_then_finetune(&bad, (&pre, &pre), (&fine, &fine), &codec(), dir.path()).is_err());
}

#[test]
fn generate_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let data = latents(1, &ALL, 14);
    let cfg = tiny_config(TrainMode::MultiRate, &ALL, 1);
    let o = train_ldm(&cfg, &data, &data, &codec(), &Start::Fresh, dir.path()).unwrap();
    let sampler = cfg.sampler.clone();
    let (a, b) = (dir.path().join("a.wav"), dir.path().join("b.wav"));
    let w = generate(&o.best_path, "a rising chirp", 48_000, &sampler, &a).unwrap();
    generate(&o.best_path, "a rising chirp", 48_000, &sampler, &b).unwrap();
    assert!((w.len() as i64 - 48_000).abs() <= 480, "{} samples", w.len());
    assert_eq!(read_wav(&a).unwrap().rate_hz, 48_000);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(matches!(
        generate(&o.best_path, "x", 44_100, &sampler, &dir.path().join("c.wav")),
        Err(Error::UnknownRate { .. })
    ));
    let corrupt = dir.path().join("corrupt.safetensors");
    std::fs::write(&corrupt, b"not a checkpoint").unwrap();
    assert!(generate(&corrupt, "x", 16_000, &sampler, &dir.path().join("d.wav")).is_err());
}
