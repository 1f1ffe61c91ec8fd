use proptest::prelude::*;
use ratediff::dataset::{build_corpus, load_mels, CorpusConfig, Split};
use ratediff::metrics::*;
use ratediff::rng::{normal_f64, rng_for};

fn simplex(raw: Vec<f64>) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn dist(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, k).prop_map(simplex)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inception_score_within_bounds(ps in prop::collection::vec(dist(6), 1..20)) {
        let is = inception_score(&ps).unwrap();
        prop_assert!((1.0..=6.0).contains(&is));
    }

    #[test]
    fn paired_kl_nonnegative(pairs in prop::collection::vec((dist(5), dist(5)), 1..10)) {
        let (g, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        prop_assert!(paired_kl(&g, &r).unwrap() >= 0.0);
    }

    #[test]
    fn fd_symmetric_and_nonnegative(seed in 0u64..1000, shift in -2.0f64..2.0) {
        let mut rng = rng_for(&[seed]);
        let a: Vec<Vec<f64>> = (0..12).map(|_| normal_f64(&mut rng, 3)).collect();
        let b: Vec<Vec<f64>> = (0..15).map(|_| normal_f64(&mut rng, 3).iter().map(|x| 2.0 * x + shift).collect()).collect();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-9);
    }
}

#[test]
fn off_simplex_inputs_are_rejected() {
    assert!(inception_score(&[vec![0.2, 0.2]]).is_err());
    assert!(inception_score(&[vec![-0.5, 1.5]]).is_err());
    assert!(paired_kl(&[vec![0.5, 0.5]], &[vec![0.9, 0.2]]).is_err());
    assert!(inception_score(&[]).is_err());
}

#[test]
fn offset_gaussians_give_squared_offset() {
    let mut rng = rng_for(&[42]);
    let v = [0.8, -0.6, 1.0, 0.0];
    let a: Vec<Vec<f64>> = (0..10_000).map(|_| normal_f64(&mut rng, 4)).collect();
    let b: Vec<Vec<f64>> = (0..10_000).map(|_| normal_f64(&mut rng, 4).iter().zip(&v).map(|(x, s)| x + s).collect()).collect();
    let expected: f64 = v.iter().map(|x| x * x).sum();
    let fd = frechet_distance(&a, &b).unwrap();
    assert!((fd - expected).abs() < 0.05 * expected, "fd {fd}, expected {expected}");
}

#[test]
fn classifier_shapes_overfit_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_corpus(&CorpusConfig::new(2, &[16_000]), 5, dir.path()).unwrap();
    let items = load_mels(&m, None, None).unwrap();
    let cfg = ClassifierConfig {
        steps: 120,
        batch_size: 16,
        gate: 0.0,
        seed: 3,
        ..Default::default()
    };
    let a = train_classifier(&items, &items, &items, &cfg).unwrap();
    let b = train_classifier(&items, &items, &items, &cfg).unwrap();
    assert_eq!(a.accuracy_on(&items).unwrap(), 1.0);
    let mels: Vec<_> = items.iter().map(|i| &i.mel).collect();
    let oa = a.classify(&mels).unwrap();
    let ob = b.classify(&mels).unwrap();
    assert_eq!(oa.probs, ob.probs);
    assert!(oa.probs.iter().all(|p| p.len() == NUM_CLASSES));
    assert!(oa.embeddings.iter().all(|e| e.len() == EMBED_DIM));

    let path = dir.path().join("clf.safetensors");
    a.save(&path).unwrap();
    let c = Classifier::load(&path).unwrap();
    assert_eq!(c.classify(&mels).unwrap().predictions(), oa.predictions());

    let gated = ClassifierConfig {
        steps: 1,
        gate: 1.01,
        ..cfg
    };
    assert!(matches!(train_classifier(&items, &items, &items, &gated), Err(ratediff::Error::Gate(_))));
}

#[test]
fn real_audio_against_itself_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_corpus(&CorpusConfig::new(5, &[16_000]), 8, dir.path()).unwrap();
    let items = load_mels(&m, None, None).unwrap();
    let cfg = ClassifierConfig {
        steps: 60,
        gate: 0.0,
        ..Default::default()
    };
    let clf = train_classifier(&items, &items, &items, &cfg).unwrap();
    let test = load_mels(&m, Some(Split::Train), None).unwrap();
    let mels: Vec<_> = test.iter().map(|i| i.mel.clone()).collect();
    let classes: Vec<usize> = test.iter().map(|i| i.class.index()).collect();
    let r = score_clips(&clf, &mels, &mels, &classes).unwrap();
    assert!(r.fd < 1e-6, "fd {}", r.fd);
    assert!(r.kl < 1e-6, "kl {}", r.kl);
    assert_eq!(r.prompt_acc, clf.accuracy_on(&test).unwrap());
}
