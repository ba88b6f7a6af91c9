use std::collections::BTreeMap;
use std::fs;

use mire::synthdata::*;
use mire::MireError;
use proptest::prelude::*;

fn spec(k: usize, n: usize, per: usize, rho: f64, seed: u64) -> DatasetSpec {
    DatasetSpec {
        num_classes: k,
        num_domains: n,
        samples_per_domain: per,
        image_size: 32,
        spurious_strength: rho,
        seed,
    }
}

/// Hue in [0,1) of an RGB triple.
fn hue(r: f64, g: f64, b: f64) -> f64 {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    assert!(c > 0.0, "grey pixel has no hue");
    let h = if max == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    h / 6.0
}

/// Hue bucket of the top-left pixel, which is always background.
fn corner_bucket(s: &LabeledSample, k: usize) -> usize {
    let n = s.image.shape()[1] * s.image.shape()[2];
    let d = s.image.data();
    ((hue(d[0], d[n], d[2 * n]) / HUE_SPAN * k as f64).floor() as usize).min(k - 1)
}

/// Plug-in mutual information in bits.
fn mutual_information(pairs: &[(usize, usize)]) -> f64 {
    let n = pairs.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for &(a, b) in pairs {
        *joint.entry((a, b)).or_default() += 1.0 / n;
        *pa.entry(a).or_default() += 1.0 / n;
        *pb.entry(b).or_default() += 1.0 / n;
    }
    joint.iter().map(|(&(a, b), &p)| p * (p / (pa[&a] * pb[&b])).log2()).sum()
}

#[test]
fn generation_is_deterministic() {
    let s = spec(2, 2, 4, 0.9, 7);
    assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
}

#[test]
fn full_spurious_strength_ties_hue_to_class() {
    let k = 5;
    let b = generate(&spec(k, 3, 100, 1.0, 3)).unwrap();
    for s in b.domains.iter().flat_map(|d| &d.samples).filter(|s| s.split != Split::Test) {
        assert_eq!(corner_bucket(s, k), s.y, "sample {}", s.id);
    }
}

#[test]
fn zero_spurious_strength_carries_no_hue_information() {
    let k = 5;
    let b = generate(&spec(k, 2, 5000, 0.0, 4)).unwrap();
    let pairs: Vec<(usize, usize)> = b
        .domains
        .iter()
        .flat_map(|d| &d.samples)
        .filter(|s| s.split != Split::Test)
        .map(|s| (corner_bucket(s, k), s.y))
        .collect();
    assert_eq!(pairs.len(), 10_000);
    let mi = mutual_information(&pairs);
    assert!(mi <= 0.05, "MI {mi} bits");
}

#[test]
fn held_out_samples_ignore_spurious_strength() {
    let k = 5;
    let b = generate(&spec(k, 2, 2000, 1.0, 5)).unwrap();
    let held: Vec<(usize, usize)> = b
        .domains
        .iter()
        .flat_map(|d| &d.samples)
        .filter(|s| s.split == Split::Test)
        .map(|s| (corner_bucket(s, k), s.y))
        .collect();
    assert!(mutual_information(&held) <= 0.05);
    for d in 0..2 {
        for i in 0..50 {
            assert_eq!(sample_meta(&b.spec, d, false, i).hue_slot, sample_meta(&b.spec, d, false, i).y);
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(matches!(generate(&spec(1, 2, 4, 0.5, 1)), Err(MireError::Config(_))));
    assert!(matches!(generate(&spec(2, 1, 4, 0.5, 1)), Err(MireError::Config(_))));
    assert!(matches!(generate(&spec(2, 2, 4, 1.5, 1)), Err(MireError::Config(_))));
}

#[test]
fn save_load_round_trip() {
    let b = generate(&spec(3, 2, 10, 0.9, 8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    b.save(dir.path()).unwrap();
    assert_eq!(DatasetBundle::load(dir.path()).unwrap(), b);
}

#[test]
fn corrupted_magic_is_a_format_error() {
    let b = generate(&spec(2, 2, 4, 0.9, 8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    b.save(dir.path()).unwrap();
    let shard = dir.path().join("domain_0.mird");
    let mut bytes = fs::read(&shard).unwrap();
    bytes[0] = b'X';
    fs::write(&shard, bytes).unwrap();
    assert!(matches!(DatasetBundle::load(dir.path()), Err(MireError::Format { offset: 0, .. })));
}

#[test]
fn truncated_shard_names_an_offset() {
    let b = generate(&spec(2, 2, 4, 0.9, 8)).unwrap();
    let bytes = encode_shard(&b.domains[0]).unwrap();
    match decode_shard(&bytes[..bytes.len() - 5]) {
        Err(MireError::Format { offset, .. }) => assert!(offset > 0),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn manifest_count_mismatch_is_a_consistency_error() {
    let b = generate(&spec(2, 2, 4, 0.9, 8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    b.save(dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    m["shards"][1]["count"] = serde_json::json!(99);
    fs::write(&path, m.to_string()).unwrap();
    assert!(matches!(DatasetBundle::load(dir.path()), Err(MireError::Consistency(_))));
}

#[test]
fn two_batches_cover_thirty_two_items() {
    let domain_of: Vec<usize> = (0..32).map(|i| i % 2).collect();
    let batches = epoch_batches(&domain_of, 16, 3, 0).unwrap();
    assert_eq!(batches.len(), 2);
    let mut all: Vec<usize> = batches.concat();
    all.sort_unstable();
    assert_eq!(all, (0..32).collect::<Vec<_>>());
    assert_eq!(batches, epoch_batches(&domain_of, 16, 3, 0).unwrap());
    assert_ne!(batches, epoch_batches(&domain_of, 16, 3, 1).unwrap());
}

#[test]
fn stratified_batches_hold_every_domain() {
    for n in 2..=4 {
        let domain_of: Vec<usize> = (0..n * 24).map(|i| i % n).collect();
        for batch in n..=16 {
            for b in epoch_batches(&domain_of, batch, 9, 0).unwrap() {
                if b.len() < n {
                    continue;
                }
                for d in 0..n {
                    assert!(b.iter().any(|&i| domain_of[i] == d), "n={n} batch={batch}");
                }
            }
        }
    }
}

#[test]
fn batch_errors() {
    assert!(matches!(epoch_batches(&[], 4, 0, 0), Err(MireError::Contract(_))));
    assert!(matches!(epoch_batches(&[0, 1], 0, 0, 0), Err(MireError::Contract(_))));
    assert!(BatchStream::new(vec![], 1).is_err());
}

#[test]
fn batch_stream_crosses_epochs() {
    let mut s = BatchStream::new(vec![0, 1, 0, 1, 0], 2).unwrap();
    let first: Vec<usize> = (0..2).flat_map(|_| s.next_batch(5).unwrap()).collect();
    let mut e0 = first[..5].to_vec();
    e0.sort_unstable();
    assert_eq!(e0, vec![0, 1, 2, 3, 4]);
    assert_eq!(first[..5], stratified_order(&[0, 1, 0, 1, 0], 2, 0).unwrap()[..]);
    assert_eq!(first[5..], stratified_order(&[0, 1, 0, 1, 0], 2, 1).unwrap()[..]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pixels_in_range_and_classes_balanced(k in 2usize..=7, n in 2usize..=4, per in 5usize..30, seed in 0u64..1000, rho in 0.0f64..=1.0) {
        let b = generate(&spec(k, n, per, rho, seed)).unwrap();
        for dd in &b.domains {
            prop_assert!(dd.samples.iter().all(|s| s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
            let mut counts = vec![0usize; k];
            for s in dd.samples.iter().filter(|s| s.split != Split::Test) {
                counts[s.y] += 1;
            }
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            let val = dd.samples.iter().filter(|s| s.split == Split::Val).count();
            prop_assert_eq!(val, (per as f64 * 0.1).round() as usize);
            prop_assert_eq!(dd.samples.iter().filter(|s| s.split == Split::Test).count(), per);
        }
    }
}
