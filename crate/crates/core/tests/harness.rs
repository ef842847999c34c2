use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ttalab::harness::{
    cmd_ablate, cmd_adapt, cmd_gen, cmd_pretrain, cmd_report, config_hash, ExperimentConfig,
    ABLATION_CSV_HEADER, REPORT_CSV_HEADER,
};
use ttalab::models::ModelSuite;
use ttalab::synth::Split;
use ttalab::Error;

fn small_config(extra: &[&str]) -> ExperimentConfig {
    let mut sets: Vec<String> = [
        "generator.train_count=16",
        "generator.val_count=8",
        "generator.test_count=12",
        "pretrain.epochs=2",
        "pretrain.batch_size=4",
        "adapt.batch_size=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    sets.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::load(None, &sets).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("harness")
        .join(name);
    let _ = fs::remove_dir_all(&p);
    p
}

struct Fixture {
    dataset: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = small_config(&[]);
        let dataset = scratch("fixture_data");
        cmd_gen(&cfg, &dataset, false).unwrap();
        let pre = scratch("fixture_pretrain");
        cmd_pretrain(&cfg, &dataset, &pre, false).unwrap();
        Fixture {
            dataset,
            checkpoint: pre.join("checkpoint"),
        }
    })
}

#[test]
fn gen_writes_manifest_and_refuses_to_overwrite() {
    let cfg = small_config(&[]);
    let dir = scratch("gen");
    let m = cmd_gen(&cfg, &dir, false).unwrap();
    assert_eq!(m.splits[&Split::SourceTrain].len(), 16);
    assert_eq!(m.splits[&Split::TargetTest].len(), 12);
    assert!(matches!(cmd_gen(&cfg, &dir, false), Err(Error::Exists(_))));
    assert_eq!(cmd_gen(&cfg, &dir, true).unwrap(), m);
}

#[test]
fn pretrain_is_reproducible() {
    let f = fixture();
    let cfg = small_config(&[]);
    let out = scratch("pretrain_again");
    cmd_pretrain(&cfg, &f.dataset, &out, false).unwrap();
    let first = f.checkpoint.parent().unwrap();
    for file in ["pretrain_metrics.json", "pretrain_log.jsonl"] {
        assert_eq!(
            fs::read(first.join(file)).unwrap(),
            fs::read(out.join(file)).unwrap(),
            "{file}"
        );
    }
    let a = ModelSuite::load(&f.checkpoint, Some(&cfg.model)).unwrap();
    let b = ModelSuite::load(&out.join("checkpoint"), Some(&cfg.model)).unwrap();
    for ((_, x), (_, y)) in a.state().iter().zip(b.state().iter()) {
        assert!(x.bit_eq(y));
    }
}

#[test]
fn pretrain_rejects_class_mismatch() {
    let f = fixture();
    assert!(matches!(
        ExperimentConfig::load(None, &["model.classes=4".to_string()]),
        Err(Error::Config(_))
    ));
    let mut cfg = small_config(&[]);
    cfg.model.classes = 4;
    assert!(matches!(
        cmd_pretrain(&cfg, &f.dataset, &scratch("mismatch"), false),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_learning_rate_keeps_pre_adapt_metrics() {
    let f = fixture();
    let cfg = small_config(&["adapt.lr=0"]);
    let out = scratch("adapt_lr0");
    let r = cmd_adapt(&cfg, &f.dataset, &f.checkpoint, &out, false).unwrap();
    assert_eq!(r.metrics.post_adapt, r.metrics.pre_adapt);
    assert_eq!(r.metrics.steps, 3);
    let log = fs::read_to_string(out.join("adapt_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for dir in ["before", "after"] {
        assert!(out.join(dir).is_dir());
    }
}

#[test]
fn adapt_outputs_are_deterministic() {
    let f = fixture();
    let cfg = small_config(&[]);
    let a = scratch("adapt_a");
    let b = scratch("adapt_b");
    cmd_adapt(&cfg, &f.dataset, &f.checkpoint, &a, false).unwrap();
    cmd_adapt(&cfg, &f.dataset, &f.checkpoint, &b, false).unwrap();
    for file in ["metrics.json", "metrics.csv", "adapt_log.jsonl"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let width = csv.lines().next().unwrap().split(',').count();
    assert!(csv.lines().all(|l| l.split(',').count() == width));
    // teacher plus three branches per phase
    assert_eq!(csv.lines().count(), 1 + 3 * 4);
}

#[test]
fn report_merges_runs_and_dumps_images() {
    let f = fixture();
    let runs: Vec<PathBuf> = ["run_eef", "run_merge"]
        .iter()
        .zip(["eef", "merge"])
        .map(|(name, fusion)| {
            let dir = scratch(name);
            let c = small_config(&[&format!("adapt.fusion={fusion}")]);
            cmd_adapt(&c, &f.dataset, &f.checkpoint, &dir, false).unwrap();
            dir
        })
        .collect();
    let out = scratch("report");
    let r = cmd_report(&runs, &out, 2, false).unwrap();
    assert_eq!(r.runs.len(), 2);
    assert_ne!(
        r.runs["run_eef"].config_hash,
        r.runs["run_merge"].config_hash
    );
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), REPORT_CSV_HEADER);
    assert_eq!(csv.lines().count(), 1 + 2 * 3 * 4);
    let images = out.join("images").join("run_eef");
    assert!(images.join("test_0001_pred.ppm").is_file());
    assert!(images.join("test_0000_thermal.pgm").is_file());

    // rerunning gives the same bytes
    let again = scratch("report_again");
    cmd_report(&runs, &again, 0, false).unwrap();
    assert_eq!(
        fs::read(out.join("report.json")).unwrap(),
        fs::read(again.join("report.json")).unwrap()
    );
    assert!(matches!(
        cmd_report(&[], &again, 0, true),
        Err(Error::Config(_))
    ));
}

#[test]
fn small_ablation_writes_tables() {
    let f = fixture();
    let cfg = small_config(&[
        "ablation.compare_cmsa=false",
        r#"ablation.loss_masks=[{"entropy":true,"ensemble":false,"kl":false},{"entropy":true,"ensemble":true,"kl":true}]"#,
        r#"ablation.fusions=["eef","merge"]"#,
        "ablation.batch_sizes=[4]",
        "ablation.perturbations=false",
        r#"ablation.regions=["decoder"]"#,
    ]);
    let out = scratch("ablate");
    let r = cmd_ablate(&cfg, &f.dataset, &f.checkpoint, None, &out, false).unwrap();
    // the default cell is shared by every table
    assert_eq!(r.cells.len(), 3);
    for t in &r.tables {
        let csv = fs::read_to_string(out.join("tables").join(format!("{}.csv", t.name))).unwrap();
        assert_eq!(csv.lines().next().unwrap(), ABLATION_CSV_HEADER);
        assert_eq!(csv.lines().count(), 1 + t.rows.len());
        for (row, _) in &t.rows {
            assert!(r.row_miou(&t.name, row).is_some(), "{} {row}", t.name);
        }
    }
    assert!(out.join("ablation.json").is_file());
}

#[test]
fn config_loading_and_hashing() {
    let a = small_config(&[]);
    assert_eq!(config_hash(&a), config_hash(&a.clone()));
    let b = small_config(&["adapt.temp=3"]);
    assert_eq!(b.adapt.temp, 3.0);
    assert_ne!(config_hash(&a), config_hash(&b));

    // field order in the file does not change the hash
    let dir = scratch("config");
    fs::create_dir_all(&dir).unwrap();
    let p1 = dir.join("a.json");
    let p2 = dir.join("b.json");
    fs::write(&p1, r#"{"adapt":{"temp":3.0,"lr":0.001}}"#).unwrap();
    fs::write(&p2, r#"{"adapt":{"lr":0.001,"temp":3.0}}"#).unwrap();
    let (c1, c2) = (
        ExperimentConfig::load(Some(&p1), &[]).unwrap(),
        ExperimentConfig::load(Some(&p2), &[]).unwrap(),
    );
    assert_eq!(config_hash(&c1), config_hash(&c2));

    for bad in [
        "adapt.nonsense=1",
        "adapt.temp=0",
        "novalue",
        "adapt.batch_size=1",
    ] {
        assert!(
            matches!(
                ExperimentConfig::load(None, &[bad.to_string()]),
                Err(Error::Config(_))
            ),
            "{bad}"
        );
    }
    fs::write(&p1, "{ not json").unwrap();
    assert!(ExperimentConfig::load(Some(&p1), &[]).is_err());
}
