mod common;

use mico::data::{
    decode_dataset, desk_ladder, encode_dataset, generate_all, load_dataset, sample_joint, save_dataset,
    stratified_split, LatentOracle, PairDataset, Record, SyntheticSpec, World,
};
use mico::modality::{ModalitySample, ModalityTag};
use mico::Error;
use proptest::prelude::*;

#[test]
fn generated_sets_round_trip_byte_identical() {
    let cfg = common::tiny_config(8);
    let (train, eval) = common::datasets(&cfg);
    let dir = tempfile::tempdir().unwrap();
    for ds in train.iter().chain(&eval) {
        let bytes = encode_dataset(ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(&back, ds);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
        let path = dir.path().join(format!("{}.mico", ds.id));
        save_dataset(ds, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(&load_dataset(&path).unwrap(), ds);
    }
}

#[test]
fn decode_reports_offsets() {
    let cfg = common::tiny_config(8);
    let (train, _) = common::datasets(&cfg);
    let bytes = encode_dataset(&train[0]).unwrap();
    for cut in [0, 3, 7, 20, bytes.len() - 1] {
        let err = decode_dataset(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. } | Error::Truncated { .. }), "{cut}: {err}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_dataset(&extra), Err(Error::Malformed { .. })));
}

#[test]
fn generator_is_a_function_of_the_seed() {
    let cfg = common::tiny_config(8);
    let spec = SyntheticSpec::from_config(&cfg);
    assert_eq!(generate_all(&spec).unwrap(), generate_all(&spec).unwrap());
    let other = SyntheticSpec { seed: spec.seed + 1, ..spec.clone() };
    assert_ne!(generate_all(&spec).unwrap().0, generate_all(&other).unwrap().0);
}

#[test]
fn records_match_their_dataset() {
    let cfg = common::tiny_config(8);
    let spec = SyntheticSpec::from_config(&cfg);
    let (train, eval) = generate_all(&spec).unwrap();
    let oracle = LatentOracle::new(&World::new(&spec).unwrap()).unwrap();
    let vocab = spec.vocabulary();
    for ds in train.iter().chain(&eval) {
        for r in &ds.records {
            for s in &r.samples {
                s.check_layout(&cfg.model.shapes).unwrap();
                if s.tag.caption_group() == s.tag {
                    assert_eq!(vocab.decode_category(&s.caption), Some(r.category as usize));
                } else {
                    assert!(s.caption.is_empty());
                }
                assert!(s.caption.iter().all(|&t| (t as usize) < cfg.model.vocab));
                if s.tag != ModalityTag::Text {
                    assert_eq!(oracle.recover(s).unwrap().len(), spec.latent_dim);
                }
            }
        }
    }
    assert_eq!(train[3].records[0].tags(), ModalityTag::KNOWLEDGE.to_vec());
}

#[test]
fn ladder_at_desk_scale() {
    assert_eq!(desk_ladder(1e-4), vec![100, 1000, 11000, 33400]);
}

#[test]
fn oversize_split_is_rejected() {
    let ds = categories_dataset(&[3, 2]);
    assert!(matches!(stratified_split(&ds, 6, 0), Err(Error::Invalid(_))));
}

fn categories_dataset(counts: &[usize]) -> PairDataset {
    let mut records = Vec::new();
    // interleave categories so order preservation is observable
    let mut left = counts.to_vec();
    while left.iter().any(|&n| n > 0) {
        for (c, n) in left.iter_mut().enumerate() {
            if *n > 0 {
                *n -= 1;
                records.push(Record {
                    category: c as u32,
                    samples: vec![ModalitySample {
                        tag: ModalityTag::Text,
                        shape: vec![0],
                        payload: vec![],
                        caption: vec![records.len() as u32],
                    }],
                });
            }
        }
    }
    PairDataset { id: "T-I".into(), records }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn stratified_split_is_proportional(
        counts in prop::collection::vec(0usize..60, 1..8),
        frac in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let ds = categories_dataset(&counts);
        let total = ds.len();
        let size = (frac * total as f64).floor() as usize;
        let sub = stratified_split(&ds, size, seed).unwrap();
        prop_assert_eq!(sub.len(), size);
        prop_assert_eq!(&sub, &stratified_split(&ds, size, seed).unwrap());
        for (c, &n) in counts.iter().enumerate() {
            let got = sub.records.iter().filter(|r| r.category == c as u32).count();
            let exact = size as f64 * n as f64 / total.max(1) as f64;
            prop_assert!((got as f64 - exact).abs() <= 1.0, "category {}: {} vs {}", c, got, exact);
        }
        let ids: Vec<u32> = sub.records.iter().map(|r| r.samples[0].caption[0]).collect();
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn distinct_batches_never_repeat(
        sizes in prop::collection::vec(1usize..12, 1..4),
        batch in 1usize..10,
        seed in any::<u64>(),
        step in 0u64..1000,
    ) {
        let sets: Vec<PairDataset> = sizes.iter().map(|&n| categories_dataset(&[n])).collect();
        let refs: Vec<&PairDataset> = sets.iter().collect();
        let weights: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
        let a = sample_joint(&refs, &weights, batch, seed, step, true).unwrap();
        prop_assert_eq!(&a, &sample_joint(&refs, &weights, batch, seed, step, true).unwrap());
        let total: usize = sizes.iter().sum();
        if batch <= total {
            let mut seen = std::collections::HashSet::new();
            for s in &a {
                prop_assert!(s.record < sizes[s.source]);
                // once a dataset is exhausted, a repeat is the only option
                if seen.iter().filter(|(src, _)| *src == s.source).count() < sizes[s.source] {
                    prop_assert!(seen.insert((s.source, s.record)));
                }
            }
        }
    }
}
