use filter_triage::data::cache::{decode_dataset, encode_dataset};
use filter_triage::data::cifar::TEST_ID_OFFSET;
use filter_triage::data::split::split_indices;
use filter_triage::data::synthetic::{synthetic_dataset, SyntheticSpec};
use filter_triage::data::{
    compute_stats, load_cifar10, preprocess, read_dataset, split, write_dataset, CifarPart, LoadOptions, SplitSpec,
    SplitTag,
};
use filter_triage::distortion::{distort_dataset, DistortionSpec};
use proptest::prelude::*;

fn synth(per_class: usize, seed: u64) -> filter_triage::data::Dataset {
    synthetic_dataset(&SyntheticSpec::cifar_like(10, per_class, seed), SplitTag::Train).unwrap()
}

#[test]
fn cifar_directory_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let train = synth(3, 1);
    let mut spec = SyntheticSpec::cifar_like(10, 1, 2);
    spec.id_offset = 500;
    let test = synthetic_dataset(&spec, SplitTag::Test).unwrap();
    filter_triage::data::cifar::write_cifar10_dir(tmp.path(), &train, &test).unwrap();

    let strict = load_cifar10(tmp.path(), CifarPart::Train, LoadOptions::default());
    assert!(strict.is_err(), "30 records are not the canonical count");

    let loose = LoadOptions { strict_counts: false };
    let back = load_cifar10(tmp.path(), CifarPart::Train, loose).unwrap();
    assert_eq!(back.pixels, train.pixels);
    assert_eq!(back.labels, train.labels);
    assert_eq!(back.ids, (0..30).collect::<Vec<u64>>());

    let back_test = load_cifar10(tmp.path(), CifarPart::Test, loose).unwrap();
    assert_eq!(back_test.pixels, test.pixels);
    assert!(back_test.ids.iter().all(|&id| id >= TEST_ID_OFFSET));
}

#[test]
fn truncated_batch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synth(1, 3);
    filter_triage::data::cifar::write_cifar10_dir(tmp.path(), &ds, &ds).unwrap();
    let f = tmp.path().join("test_batch.bin");
    let bytes = std::fs::read(&f).unwrap();
    std::fs::write(&f, &bytes[..bytes.len() - 7]).unwrap();
    let r = load_cifar10(tmp.path(), CifarPart::Test, LoadOptions { strict_counts: false });
    assert!(r.is_err());
    assert!(load_cifar10(&tmp.path().join("absent"), CifarPart::Test, LoadOptions::default()).is_err());
}

#[test]
fn cache_round_trip_keeps_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let noisy = distort_dataset(&synth(2, 4), &DistortionSpec::awgn(15.0, 8)).unwrap();
    let path = tmp.path().join("noisy.ftds");
    write_dataset(&noisy, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), noisy);
    let mut bytes = encode_dataset(&noisy).unwrap();
    assert_eq!(decode_dataset(&bytes).unwrap(), noisy);
    bytes[0] ^= 0xff;
    assert!(decode_dataset(&bytes).is_err());
}

#[test]
fn stratified_split_is_disjoint_and_balanced() {
    let ds = synth(20, 5);
    let spec = SplitSpec {
        ratio: 0.8,
        seed: 11,
        stratified: true,
    };
    let (train, val) = split(&ds, &spec).unwrap();
    assert_eq!(train.len(), 160);
    assert_eq!(val.len(), 40);
    assert!(train.class_counts().iter().all(|&c| c == 16));
    let mut ids: Vec<u64> = train.ids.iter().chain(&val.ids).copied().collect();
    ids.sort_unstable();
    assert_eq!(ids, ds.ids);
    assert_eq!(split(&ds, &spec).unwrap(), (train, val));
}

#[test]
fn preprocessing_centers_training_channels() {
    let ds = synth(10, 6);
    let stats = compute_stats(&ds).unwrap();
    let set = preprocess::<f64>(&ds, &stats).unwrap();
    let plane = 32 * 32;
    for c in 0..3 {
        let vals: Vec<f64> = (0..ds.len())
            .flat_map(|i| set.x.data()[(i * 3 + c) * plane..(i * 3 + c + 1) * plane].to_vec())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "channel {c} var {var}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn distortion_follows_the_image_not_its_position(seed in 0u64..1000, sigma in 1.0f64..40.0, blur in any::<bool>()) {
        let ds = synth(1, seed);
        let spec = if blur { DistortionSpec::blur(sigma / 10.0, seed) } else { DistortionSpec::awgn(sigma, seed) };
        let order: Vec<usize> = (0..ds.len()).rev().collect();
        let a = distort_dataset(&ds, &spec).unwrap().subset(&order);
        let b = distort_dataset(&ds.subset(&order), &spec).unwrap();
        prop_assert_eq!(&a.pixels, &b.pixels);
        prop_assert!(b.pixels.iter().all(|v| (0.0..=255.0).contains(v)));
    }

    #[test]
    fn split_partitions_any_labels(labels in prop::collection::vec(0usize..5, 10..200), ratio in 0.1f64..0.9, seed in any::<u64>()) {
        let (t, v) = split_indices(&labels, 5, &SplitSpec { ratio, seed, stratified: true }).unwrap();
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        prop_assert_eq!(t.len(), (ratio * labels.len() as f64).round() as usize);
    }
}
