use haat_core::weights::{self, MAGIC};
use haat_core::{build_model, Error, ModelConfig, ParamStore, Tensor, WeightsError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_store(n: usize, seed: u64) -> ParamStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for i in 0..n {
        let rank = rng.gen_range(1..=4);
        let dims: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..6)).collect();
        // raw bit patterns cover subnormals, negative zero and extremes
        let t = Tensor::from_fn(&dims, |_| loop {
            let v = f32::from_bits(rng.gen());
            if v.is_finite() {
                break v;
            }
        });
        store.insert(format!("t{i}.w"), t).unwrap();
    }
    store
}

#[test]
fn hundred_random_tensors_roundtrip_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.haatw");
    let store = random_store(100, 42);
    let cfg = ModelConfig::toy();
    weights::save_weights(&store, &cfg, &path).unwrap();
    let (loaded, cfg2) = weights::load_weights(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(loaded.len(), 100);
    for ((n1, t1), (n2, t2)) in store.iter().zip(loaded.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(b1, b2, "{n1}");
    }
}

#[test]
fn model_roundtrip_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.haatw");
    let cfg = ModelConfig { alpha: 0.125, scale: 3, ..ModelConfig::toy() };
    let (model, store) = build_model(&cfg, 9).unwrap();
    weights::save_weights(&store, &cfg, &path).unwrap();
    let (model2, store2) = weights::load_model(&path).unwrap();
    assert_eq!(model2.config, cfg);
    let x = Tensor::from_fn(&[1, 3, 6, 5], |i| (i % 7) as f32 / 7.0);
    assert_eq!(
        model.upscale(&store, &x).unwrap().data(),
        model2.upscale(&store2, &x).unwrap().data()
    );
}

#[test]
fn header_layout() {
    let bytes = weights::encode(&random_store(1, 0), &ModelConfig::toy()).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let field = |i: usize| i32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    assert_eq!(field(0), 16);
    assert_eq!(field(12), 200_000);
    assert_eq!(u32::from_le_bytes(bytes[72..76].try_into().unwrap()), 1);
}

#[test]
fn every_truncation_is_a_truncation_error() {
    let bytes = weights::encode(&random_store(3, 1), &ModelConfig::toy()).unwrap();
    for cut in 0..bytes.len() {
        match weights::decode(&bytes[..cut]) {
            Err(Error::Weights(WeightsError::Truncated(_))) => {}
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
}

#[test]
fn corrupt_headers_have_distinct_errors() {
    let good = weights::encode(&random_store(2, 2), &ModelConfig::toy()).unwrap();
    let mut bad = good.clone();
    bad[0] = b'P';
    assert!(matches!(weights::decode(&bad), Err(Error::Weights(WeightsError::BadMagic(_)))));
    let mut bad = good.clone();
    bad[5] = b'9';
    assert!(matches!(weights::decode(&bad), Err(Error::Weights(WeightsError::UnsupportedVersion(b'9')))));
    let mut bad = good.clone();
    bad.push(0);
    assert!(matches!(weights::decode(&bad), Err(Error::Weights(WeightsError::TrailingBytes(1)))));
    let mut bad = good.clone();
    bad[8..12].copy_from_slice(&18i32.to_le_bytes());
    assert!(matches!(weights::decode(&bad), Err(Error::Config { field: "channels", .. })));
}

#[test]
fn truncated_file_yields_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.haatw");
    let (_, store) = build_model(&ModelConfig::toy(), 0).unwrap();
    let bytes = weights::encode(&store, &ModelConfig::toy()).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(weights::load_model(&path), Err(Error::Weights(WeightsError::Truncated(_)))));
}

#[test]
fn toy_weights_do_not_fit_the_full_preset() {
    let (_, toy) = build_model(&ModelConfig::toy(), 0).unwrap();
    let (_, full) = build_model(&ModelConfig::full(), 0).unwrap();
    match weights::check_compatible(&full, &toy) {
        Err(WeightsError::ShapeMismatch { name, expected, found }) => {
            assert_eq!(name, "shallow.weight");
            assert_eq!(expected, [180, 3, 3, 3]);
            assert_eq!(found, [16, 3, 3, 3]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn renamed_or_missing_tensors_are_reported() {
    let cfg = ModelConfig::toy();
    let (_, store) = build_model(&cfg, 0).unwrap();
    let mut renamed = ParamStore::new();
    let mut shorter = ParamStore::new();
    for (i, (n, t)) in store.iter().enumerate() {
        renamed.insert(if i == 3 { "bogus".to_string() } else { n.to_string() }, t.clone()).unwrap();
        if i + 1 < store.len() {
            shorter.insert(n, t.clone()).unwrap();
        }
    }
    assert!(matches!(
        weights::check_compatible(&store, &renamed),
        Err(WeightsError::NameMismatch { index: 3, .. })
    ));
    assert!(matches!(
        weights::check_compatible(&store, &shorter),
        Err(WeightsError::CountMismatch { .. })
    ));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.haatw");
    weights::save_weights(&shorter, &cfg, &path).unwrap();
    assert!(weights::load_model(&path).is_err());
}
