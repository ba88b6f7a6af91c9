mod common;

use std::collections::HashSet;

use common::{rand_tensor, rng};
use mire::cdm::*;
use mire::nets::{MireNets, NetConfig};
use mire::saliency::SaliencyConfig;
use mire::synthdata::{generate, DatasetBundle, DatasetSpec, Split};
use mire::tensor::Tensor;
use mire::MireError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bundle(n: usize, per: usize) -> DatasetBundle {
    generate(&DatasetSpec {
        num_classes: 3,
        num_domains: n,
        samples_per_domain: per,
        image_size: 16,
        spurious_strength: 0.9,
        seed: 2,
    })
    .unwrap()
}

/// Keeps only the first `counts[d]` train samples of each domain.
fn trimmed(mut b: DatasetBundle, counts: &[usize]) -> DatasetBundle {
    for (dd, &c) in b.domains.iter_mut().zip(counts) {
        dd.samples.retain(|s| s.split == Split::Train);
        dd.samples.truncate(c);
    }
    b
}

fn nets(n: usize) -> MireNets {
    MireNets::new(NetConfig::new(3, Some(n)), 4).unwrap()
}

fn run(b: &DatasetBundle, sources: &[usize]) -> Augmented {
    augment_dataset(
        b,
        sources,
        &nets(sources.len()),
        MaskRule::default(),
        &SaliencyConfig::default(),
        &MixConfig::default(),
    )
    .unwrap()
}

fn audit(b: &DatasetBundle, aug: &Augmented, sources: &[usize]) {
    let originals = b.select(sources, Split::Train);
    let mixed: Vec<_> = aug.bundle.domains.iter().flat_map(|d| &d.samples).filter(|s| s.provenance.is_some()).collect();
    assert_eq!(mixed.len(), (sources.len() - 1) * originals.len());
    assert_eq!(aug.masks.len(), originals.len());
    let ids: HashSet<u64> = aug.bundle.domains.iter().flat_map(|d| &d.samples).map(|s| s.id).collect();
    assert_eq!(ids.len(), aug.bundle.num_samples());
    for m in &mixed {
        let p = m.provenance.unwrap();
        assert_ne!(p.bg_domain, m.d);
        assert!(sources.contains(&p.bg_domain));
        let fg = originals.iter().find(|s| s.id == p.fg_id).unwrap();
        assert_eq!((m.y, m.d, m.split), (fg.y, fg.d, Split::Train));
        let bg = originals.iter().find(|s| s.id == p.bg_id).unwrap();
        assert_eq!(bg.d, p.bg_domain);
        assert!(m.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    for fg in &originals {
        let donors: HashSet<usize> = mixed
            .iter()
            .filter(|m| m.provenance.unwrap().fg_id == fg.id)
            .map(|m| m.provenance.unwrap().bg_domain)
            .collect();
        assert_eq!(donors.len(), sources.len() - 1);
    }
}

#[test]
fn counting_law_for_two_to_four_sources() {
    for n in 2..=4 {
        let b = bundle(n + 1, 10);
        let sources: Vec<usize> = (0..n).collect();
        let aug = run(&b, &sources);
        audit(&b, &aug, &sources);
        let originals: usize = sources.iter().map(|&d| b.domain(d).unwrap().samples.len()).sum();
        assert_eq!(aug.bundle.num_samples(), originals + (n - 1) * b.select(&sources, Split::Train).len());
        assert!(aug.bundle.domain(n).is_err());
    }
}

#[test]
fn hundred_originals_over_three_sources() {
    let b = trimmed(bundle(3, 40), &[34, 33, 33]);
    let aug = run(&b, &[0, 1, 2]);
    let train = aug.bundle.select(&[0, 1, 2], Split::Train);
    assert_eq!(train.iter().filter(|s| s.provenance.is_some()).count(), 200);
    assert_eq!(train.len(), 300);
    audit(&b, &aug, &[0, 1, 2]);
}

#[test]
fn single_original_per_domain() {
    let b = trimmed(bundle(2, 4), &[1, 1]);
    let aug = run(&b, &[0, 1]);
    for d in 0..2 {
        let mixed: Vec<_> = aug.bundle.domain(d).unwrap().samples.iter().filter(|s| s.provenance.is_some()).collect();
        assert_eq!(mixed.len(), 1);
        assert_eq!(mixed[0].provenance.unwrap().bg_domain, 1 - d);
    }
}

#[test]
fn one_source_is_a_contract_error() {
    let b = bundle(2, 4);
    let r = augment_dataset(&b, &[0], &nets(2), MaskRule::default(), &SaliencyConfig::default(), &MixConfig::default());
    assert!(matches!(r, Err(MireError::Contract(_))));
}

#[test]
fn augmentation_is_deterministic() {
    let b = bundle(3, 10);
    let a1 = run(&b, &[0, 2]);
    let a2 = run(&b, &[0, 2]);
    assert_eq!(a1.bundle, a2.bundle);
    assert_eq!(a1.masks, a2.masks);
}

#[test]
fn mask_rules_change_masks() {
    let b = bundle(3, 10);
    let sal = SaliencyConfig::default();
    let n = nets(3);
    let originals = b.select(&[0, 1, 2], Split::Train);
    let idx = |d: usize| Ok(d);
    let full = compute_masks(&n, &originals, &idx, MaskRule::default(), &sal).unwrap();
    for rule in [
        MaskRule { invert_md: true, ..MaskRule::default() },
        MaskRule { no_mc: true, ..MaskRule::default() },
        MaskRule { no_md: true, ..MaskRule::default() },
    ] {
        let other = compute_masks(&n, &originals, &idx, rule, &sal).unwrap();
        let differing: usize = full
            .iter()
            .zip(&other)
            .map(|(a, b)| a.values.data().iter().zip(b.values.data()).filter(|(x, y)| x != y).count())
            .sum();
        assert!(differing > 0, "{rule:?}");
    }
    let none = compute_masks(&n, &originals, &idx, MaskRule { no_mc: true, no_md: true, invert_md: false }, &sal).unwrap();
    assert!(none.iter().all(|m| m.values.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn constant_image_gives_constant_background() {
    let img = Tensor::full(&[3, 32, 32], 0.37);
    let bg = make_background(&img, &MixConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(bg.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    assert_eq!(bg.shape(), &[3, 32, 32]);
}

#[test]
fn background_config_errors() {
    let img = Tensor::zeros(&[3, 8, 8]);
    let cfg = MixConfig { crop_area_ratio: 1.5, ..MixConfig::default() };
    assert!(matches!(make_background(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)), Err(MireError::Config(_))));
    let cfg = MixConfig { blur_size: 4, ..MixConfig::default() };
    assert!(cfg.validate().is_err());
    assert_eq!(crop_side(32, 1.0 / 8.0).unwrap(), 11);
}

#[test]
fn mix_identities_are_bit_exact() {
    let mut r = rng(12);
    for _ in 0..20 {
        let xi = rand_tensor(&mut r, &[3, 8, 8], 0.0, 1.0);
        let bg = rand_tensor(&mut r, &[3, 8, 8], 0.0, 1.0);
        assert_eq!(mix_images(&xi, &Tensor::full(&[8, 8], 1.0), &bg).unwrap(), xi);
        assert_eq!(mix_images(&xi, &Tensor::zeros(&[8, 8]), &bg).unwrap(), bg);
    }
}

proptest! {
    #[test]
    fn self_mix_and_range(xi in prop::collection::vec(0.0f64..=1.0, 48), bg in prop::collection::vec(0.0f64..=1.0, 48), m in prop::collection::vec(0.0f64..=1.0, 16)) {
        let xi = Tensor::new(&[3, 4, 4], xi).unwrap();
        let bg = Tensor::new(&[3, 4, 4], bg).unwrap();
        let m = Tensor::new(&[4, 4], m).unwrap();
        prop_assert_eq!(mix_images(&xi, &m, &xi).unwrap(), xi.clone());
        let out = mix_images(&xi, &m, &bg).unwrap();
        for (i, &v) in out.data().iter().enumerate() {
            let (a, b) = (xi.data()[i], bg.data()[i]);
            prop_assert!(v >= a.min(b) && v <= a.max(b));
            prop_assert!((v - (m.data()[i % 16] * a + (1.0 - m.data()[i % 16]) * b)).abs() < 1e-12);
        }
    }
}
