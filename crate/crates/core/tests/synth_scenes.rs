use std::collections::BTreeSet;
use std::fs;

use ttalab::synth::{
    build_splits, crop_window, generate_scene, load_dataset, load_manifest, perturb, save_dataset,
    split_seeds, Domain, GeneratorConfig, Perturbation, Split, CLASS_NAMES, CROP_RULE,
};
use ttalab::Error;

fn small() -> GeneratorConfig {
    GeneratorConfig {
        train_count: 6,
        val_count: 3,
        test_count: 4,
        ..GeneratorConfig::default()
    }
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

#[test]
fn scenes_are_deterministic() {
    let cfg = GeneratorConfig::default();
    for d in [Domain::Day, Domain::Night] {
        let a = generate_scene(&cfg, d, 17).unwrap();
        let b = generate_scene(&cfg, d, 17).unwrap();
        assert!(
            a.color.bit_eq(&b.color) && a.thermal.bit_eq(&b.thermal) && a.labels.bit_eq(&b.labels)
        );
    }
}

#[test]
fn scene_shapes_and_value_ranges() {
    let cfg = GeneratorConfig::default();
    let s = generate_scene(&cfg, Domain::Night, 3).unwrap();
    assert_eq!(s.color.shape(), &[3, 32, 32]);
    assert_eq!(s.thermal.shape(), &[1, 32, 32]);
    assert_eq!(s.labels.shape(), &[32, 32]);
    assert!(s
        .color
        .data()
        .iter()
        .chain(s.thermal.data())
        .all(|v| (0.0..=1.0).contains(v)));
    assert!(s.label_indices().iter().all(|&l| l < CLASS_NAMES.len()));
    // day and night share the layout
    let d = generate_scene(&cfg, Domain::Day, 3).unwrap();
    assert!(d.labels.bit_eq(&s.labels));
}

#[test]
fn night_is_darker() {
    let cfg = GeneratorConfig::default();
    for seed in 0..20 {
        let d = generate_scene(&cfg, Domain::Day, seed).unwrap();
        let n = generate_scene(&cfg, Domain::Night, seed).unwrap();
        assert!(n.color.mean() < d.color.mean(), "seed {seed}");
    }
}

#[test]
fn color_gap_exceeds_thermal_gap() {
    let cfg = GeneratorConfig::default();
    let (mut gc, mut gt) = (0.0, 0.0);
    for seed in 0..100 {
        let d = generate_scene(&cfg, Domain::Day, seed).unwrap();
        let n = generate_scene(&cfg, Domain::Night, seed).unwrap();
        gc += rms(d.color.data(), n.color.data());
        gt += rms(d.thermal.data(), n.thermal.data());
    }
    assert!(gc / 100.0 > gt / 100.0, "color {gc} thermal {gt}");
}

#[test]
fn split_sizes_domains_and_disjoint_seeds() {
    let cfg = GeneratorConfig::default();
    assert_eq!(
        (cfg.train_count, cfg.val_count, cfg.test_count),
        (200, 50, 100)
    );
    let seeds: Vec<BTreeSet<u64>> = Split::ALL
        .iter()
        .map(|&s| split_seeds(&cfg, s).into_iter().collect())
        .collect();
    assert_eq!(
        seeds.iter().map(|s| s.len()).collect::<Vec<_>>(),
        vec![200, 50, 100]
    );
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(seeds[i].is_disjoint(&seeds[j]));
        }
    }
    let ds = build_splits(&small()).unwrap();
    assert_eq!(ds.source_train.len(), 6);
    assert!(ds.target_test.iter().all(|p| p.domain == Domain::Night));
    assert!(ds
        .source_train
        .iter()
        .chain(&ds.source_val)
        .all(|p| p.domain == Domain::Day));
}

#[test]
fn crop_rule() {
    assert_eq!(crop_window(32, 0.2).unwrap(), 26);
    assert_eq!(crop_window(32, 0.0).unwrap(), 32);
    assert!(crop_window(32, 0.9).is_err());
    assert!(CROP_RULE.contains("even"));
    let s = generate_scene(&GeneratorConfig::default(), Domain::Night, 1).unwrap();
    let c = perturb(&s, Perturbation::Crop { rate: 0.2 }, 0).unwrap();
    assert_eq!(c.color.shape(), s.color.shape());
    // the centre pixel survives a centred crop
    assert_eq!(c.labels.at(&[16, 16]), s.labels.at(&[16, 16]));
}

#[test]
fn brightness_and_noise() {
    let s = generate_scene(&GeneratorConfig::default(), Domain::Night, 2).unwrap();
    let same = perturb(&s, Perturbation::Brightness { factor: 1.0 }, 0).unwrap();
    assert!(same.color.bit_eq(&s.color));
    let dim = perturb(&s, Perturbation::Brightness { factor: 0.8 }, 0).unwrap();
    assert!(dim.color.mean() < s.color.mean());
    assert!(dim.thermal.bit_eq(&s.thermal));

    let p = Perturbation::Noise { range: 5.0 };
    let a = perturb(&s, p, 9).unwrap();
    let b = perturb(&s, p, 9).unwrap();
    let c = perturb(&s, p, 10).unwrap();
    assert!(a.color.bit_eq(&b.color) && a.thermal.bit_eq(&b.thermal));
    assert!(!a.color.bit_eq(&c.color));
    assert!(a.labels.bit_eq(&s.labels));
}

#[test]
fn save_load_round_trip() {
    let ds = build_splits(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = save_dataset(&ds, dir.path()).unwrap();
    assert_eq!(m.splits[&Split::SourceTrain].len(), 6);
    assert_eq!(m.splits[&Split::SourceVal].len(), 3);
    assert_eq!(m.splits[&Split::TargetTest].len(), 4);
    assert_eq!(m.crop_rule, CROP_RULE);
    assert_eq!(load_manifest(dir.path()).unwrap(), m);
    let back = load_dataset(dir.path()).unwrap();
    for s in Split::ALL {
        for (a, b) in ds.split(s).iter().zip(back.split(s)) {
            assert!(
                a.color.bit_eq(&b.color)
                    && a.thermal.bit_eq(&b.thermal)
                    && a.labels.bit_eq(&b.labels)
            );
            assert_eq!((a.seed, a.domain), (b.seed, b.domain));
        }
    }
    // same seed, same checksums
    let dir2 = tempfile::tempdir().unwrap();
    assert_eq!(
        save_dataset(&build_splits(&small()).unwrap(), dir2.path()).unwrap(),
        m
    );
}

#[test]
fn corrupted_file_fails_checksum() {
    let ds = build_splits(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = save_dataset(&ds, dir.path()).unwrap();
    let victim = dir
        .path()
        .join(&m.splits[&Split::TargetTest][1].thermal.file);
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&victim, bytes).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Checksum(p)) => assert_eq!(p, victim),
        other => panic!("expected checksum error, got {:?}", other.err()),
    }
}

#[test]
fn invalid_generator_config_is_rejected() {
    let bad = GeneratorConfig {
        night_gamma: 0.8,
        ..GeneratorConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}
