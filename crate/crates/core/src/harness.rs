//! Experiment orchestration behind the `ttalab` subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{eef_fuse, FusionStrategy};
use crate::images;
use crate::metrics::MetricsReport;
use crate::models::{build_model_suite, Modality, ModelConfig, ModelSuite, RegionSelect};
use crate::nn::BnMode;
use crate::synth::{
    batches, build_splits, label_ppm, load_dataset, perturb, save_dataset, Dataset,
    GeneratorConfig, Manifest, Perturbation, ScenePair, CLASS_NAMES,
};
use crate::train::{pretrain, EpochRecord, PretrainConfig};
use crate::tta::{
    adapt_epoch, argmax_labels, evaluate, predict_batch, reestimate_running_stats, AdaptConfig,
    Evaluation, LossMask, StepRecord,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub crop_rate: f64,
    pub brightness: f64,
    pub noise_range: f64,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            crop_rate: 0.2,
            brightness: 0.8,
            noise_range: 5.0,
            seed: 99,
        }
    }
}

impl PerturbationConfig {
    pub fn all(&self) -> [Perturbation; 3] {
        [
            Perturbation::Crop {
                rate: self.crop_rate,
            },
            Perturbation::Brightness {
                factor: self.brightness,
            },
            Perturbation::Noise {
                range: self.noise_range,
            },
        ]
    }
}

/// The seven non-empty combinations of the three loss families.
pub fn loss_mask_grid() -> Vec<LossMask> {
    (1u8..8)
        .map(|bits| LossMask {
            entropy: bits & 1 != 0,
            ensemble: bits & 2 != 0,
            kl: bits & 4 != 0,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub loss_masks: Vec<LossMask>,
    pub fusions: Vec<FusionStrategy>,
    /// Also pretrain and evaluate a suite without the attention module.
    pub compare_cmsa: bool,
    pub regions: Vec<RegionSelect>,
    pub batch_sizes: Vec<usize>,
    pub perturbations: bool,
    /// Upper bound on concurrently running cells.
    pub jobs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            loss_masks: loss_mask_grid(),
            fusions: vec![
                FusionStrategy::Eef,
                FusionStrategy::Merge,
                FusionStrategy::Ie,
            ],
            compare_cmsa: true,
            regions: vec![
                RegionSelect::Encoder,
                RegionSelect::Decoder,
                RegionSelect::Both,
            ],
            batch_sizes: vec![1, 2, 4, 8],
            perturbations: true,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub perturbation: PerturbationConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        if self.model.classes != self.generator.classes() {
            return Err(Error::Config(format!(
                "model.classes = {} but the generator has {} classes",
                self.model.classes,
                self.generator.classes()
            )));
        }
        if self.ablation.jobs == 0 {
            return Err(Error::Config("ablation.jobs must be >= 1".into()));
        }
        for &b in &self.ablation.batch_sizes {
            if b == 0 {
                return Err(Error::Config(
                    "ablation.batch_sizes must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Read a JSON config (if any) and apply `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::json(p, e))?
            }
            None => serde_json::to_value(ExperimentConfig::default()).expect("config serializes"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Apply one `a.b.c=value` override; the value is parsed as JSON, or taken as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{assignment}`")))?;
    let parsed: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "--set {key}: `{}` is not a section",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        // sections left at their defaults are absent from a partial config file
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config(format!("--set: empty key in `{assignment}`")))
}

/// Canonical JSON: object keys sorted at every level, no whitespace.
pub fn canonical_json(value: &Value) -> String {
    // serde_json's default map is ordered by key
    let sorted: Value = serde_json::from_str(&value.to_string()).expect("round trip");
    sorted.to_string()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    sha256_hex(canonical_json(&v).as_bytes())
}

pub fn code_version() -> String {
    let tag = format!("ttalab-core {}", env!("CARGO_PKG_VERSION"));
    sha256_hex(tag.as_bytes())[..12].to_string()
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::json(path, e))? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Create `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Exists(dir.to_path_buf()));
        }
        if non_empty {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn class_names() -> Vec<&'static str> {
    CLASS_NAMES.to_vec()
}

/// Teacher and per-branch reports of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub bn_statistics: String,
    pub teacher: MetricsReport,
    pub branches: BTreeMap<String, MetricsReport>,
}

impl PhaseMetrics {
    pub fn from_eval(ev: &Evaluation, bn: BnMode) -> Result<Self> {
        let names = class_names();
        Ok(PhaseMetrics {
            bn_statistics: match bn {
                BnMode::Eval => "running",
                _ => "batch",
            }
            .to_string(),
            teacher: ev.teacher.report(&names)?,
            branches: Modality::ALL
                .iter()
                .map(|&m| {
                    Ok((
                        m.name().to_string(),
                        ev.branches[m as usize].report(&names)?,
                    ))
                })
                .collect::<Result<_>>()?,
        })
    }

    pub fn miou(&self) -> f64 {
        self.teacher.miou
    }

    pub fn iou(&self, branch: Option<Modality>, class: &str) -> Option<f64> {
        let r = match branch {
            None => &self.teacher,
            Some(m) => &self.branches[m.name()],
        };
        r.per_class_iou.get(class).copied().flatten()
    }
}

/// Outcome of one adaptation run; serialized as `metrics.json` (no timing or paths).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config_hash: String,
    pub code_version: String,
    pub class_names: Vec<String>,
    /// Unadapted model, BN running statistics.
    pub source_only: PhaseMetrics,
    /// Unadapted model, BN batch statistics.
    pub pre_adapt: PhaseMetrics,
    pub post_adapt: PhaseMetrics,
    /// After re-estimating running statistics on the target data.
    pub reestimated: Option<PhaseMetrics>,
    pub steps: usize,
    /// Batch size 1: statistics over the spatial extent only.
    pub protocol_divergent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub metrics: RunMetrics,
    pub adapt: AdaptConfig,
    pub wall_time_s: f64,
    pub log_path: String,
    pub dataset_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct AdaptOutcome {
    pub metrics: RunMetrics,
    pub log: Vec<StepRecord>,
    pub adapted: ModelSuite,
}

/// Evaluate, adapt on `test`, and evaluate again. `source` is left untouched.
pub fn run_adaptation(
    source: &ModelSuite,
    test: &[ScenePair],
    cfg: &AdaptConfig,
    hash: &str,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let fusion = cfg.fusion_config();
    let loader = batches(test, cfg.batch_size)?;
    let mut suite = source.clone();
    let source_only = evaluate(&mut suite, &loader, BnMode::Eval, &fusion)?;
    let pre = evaluate(&mut suite, &loader, BnMode::Adapt, &fusion)?;
    let state = adapt_epoch(&mut suite, &loader, cfg)?;
    let post = evaluate(&mut suite, &loader, BnMode::Adapt, &fusion)?;
    let reestimated = if cfg.reset_running_stats {
        let mut copy = suite.clone();
        reestimate_running_stats(&mut copy, &loader)?;
        Some(PhaseMetrics::from_eval(
            &evaluate(&mut copy, &loader, BnMode::Eval, &fusion)?,
            BnMode::Eval,
        )?)
    } else {
        None
    };
    Ok(AdaptOutcome {
        metrics: RunMetrics {
            config_hash: hash.to_string(),
            code_version: code_version(),
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            source_only: PhaseMetrics::from_eval(&source_only, BnMode::Eval)?,
            pre_adapt: PhaseMetrics::from_eval(&pre, BnMode::Adapt)?,
            post_adapt: PhaseMetrics::from_eval(&post, BnMode::Adapt)?,
            reestimated,
            steps: state.step,
            protocol_divergent: cfg.batch_size < 2,
        },
        log: state.log,
        adapted: suite,
    })
}

pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<Manifest> {
    cfg.generator.validate()?;
    prepare_out_dir(out, force)?;
    let ds = build_splits(&cfg.generator)?;
    save_dataset(&ds, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub day_val: PhaseMetrics,
    pub night_source_only: PhaseMetrics,
}

/// Train a suite on the day split and report day-val and night source-only quality.
pub fn pretrain_suite(
    cfg: &ExperimentConfig,
    model: &ModelConfig,
    ds: &Dataset,
) -> Result<(ModelSuite, PretrainReport)> {
    let (mut suite, _) = build_model_suite(model)?;
    let epochs = pretrain(&mut suite, &ds.source_train, &cfg.pretrain)?;
    let fusion = cfg.adapt.fusion_config();
    let val = batches(&ds.source_val, cfg.adapt.batch_size.max(2))?;
    let test = batches(&ds.target_test, cfg.adapt.batch_size.max(2))?;
    let day_val = evaluate(&mut suite, &val, BnMode::Eval, &fusion)?;
    let night = evaluate(&mut suite, &test, BnMode::Eval, &fusion)?;
    let report = PretrainReport {
        config_hash: config_hash(cfg),
        epochs,
        day_val: PhaseMetrics::from_eval(&day_val, BnMode::Eval)?,
        night_source_only: PhaseMetrics::from_eval(&night, BnMode::Eval)?,
    };
    Ok((suite, report))
}

/// Writes `checkpoint/`, `pretrain_log.jsonl` and `pretrain_metrics.json` under `out`.
pub fn cmd_pretrain(
    cfg: &ExperimentConfig,
    dataset: &Path,
    out: &Path,
    force: bool,
) -> Result<PretrainReport> {
    cfg.validate()?;
    let ds = load_dataset(dataset)?;
    if ds.config.classes() != cfg.model.classes {
        return Err(Error::Config(
            "dataset and model class counts differ".into(),
        ));
    }
    prepare_out_dir(out, force)?;
    let (suite, report) = pretrain_suite(cfg, &cfg.model, &ds)?;
    suite.save(&out.join("checkpoint"))?;
    let log: String = report
        .epochs
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect();
    write_text(&out.join("pretrain_log.jsonl"), &log)?;
    write_json(&out.join("pretrain_metrics.json"), &report)?;
    Ok(report)
}

fn metrics_csv(m: &RunMetrics) -> String {
    let names = class_names();
    let mut out = String::from("phase,source,");
    out += &MetricsReport::csv_header(&names).replacen("label,", "", 1);
    out.push('\n');
    let mut phases = vec![
        ("source_only", &m.source_only),
        ("pre_adapt", &m.pre_adapt),
        ("post_adapt", &m.post_adapt),
    ];
    if let Some(r) = &m.reestimated {
        phases.push(("reestimated", r));
    }
    for (phase, p) in phases {
        out += &format!("{phase},{}\n", p.teacher.csv_row("teacher", &names));
        for (b, r) in &p.branches {
            out += &format!("{phase},{}\n", r.csv_row(b, &names));
        }
    }
    out
}

/// Writes `before/`, `after/`, `adapt_log.jsonl`, `metrics.json`, `metrics.csv` and `run_record.json`.
pub fn cmd_adapt(
    cfg: &ExperimentConfig,
    dataset: &Path,
    checkpoint: &Path,
    out: &Path,
    force: bool,
) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let source = ModelSuite::load(checkpoint, Some(&cfg.model))?;
    let ds = load_dataset(dataset)?;
    prepare_out_dir(out, force)?;
    let outcome = run_adaptation(&source, &ds.target_test, &cfg.adapt, &config_hash(cfg))?;
    source.save(&out.join("before"))?;
    outcome.adapted.save(&out.join("after"))?;
    let log: String = outcome
        .log
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect();
    write_text(&out.join("adapt_log.jsonl"), &log)?;
    write_json(&out.join("metrics.json"), &outcome.metrics)?;
    write_text(&out.join("metrics.csv"), &metrics_csv(&outcome.metrics))?;
    let record = RunRecord {
        metrics: outcome.metrics,
        adapt: cfg.adapt.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
        log_path: "adapt_log.jsonl".into(),
        dataset_dir: Some(dataset.to_path_buf()),
        checkpoint_dir: Some(checkpoint.to_path_buf()),
    };
    write_json(&out.join("run_record.json"), &record)?;
    Ok(record)
}

/// One ablation cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub name: String,
    pub adapt: AdaptConfig,
    pub use_cmsa: bool,
    pub perturbation: Option<Perturbation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: CellSpec,
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn post_miou(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.post_adapt.miou())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: String,
    /// Row label → cell name.
    pub rows: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: BTreeMap<String, CellResult>,
    pub tables: Vec<AblationTable>,
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.get(name)
    }

    pub fn row_miou(&self, table: &str, row: &str) -> Option<f64> {
        let t = self.tables.iter().find(|t| t.name == table)?;
        let (_, cell) = t.rows.iter().find(|(r, _)| r == row)?;
        self.cells.get(cell)?.post_miou()
    }
}

/// Cells and tables of the ablation matrix. Cells shared between tables are listed once.
pub fn ablation_plan(cfg: &ExperimentConfig) -> (Vec<CellSpec>, Vec<AblationTable>) {
    let base = cfg.adapt.clone();
    let mut cells: BTreeMap<String, CellSpec> = BTreeMap::new();
    let mut tables = Vec::new();
    let mut add =
        |adapt: AdaptConfig, use_cmsa: bool, perturbation: Option<Perturbation>| -> String {
            let spec_hash = config_hash(&(&adapt, use_cmsa, &perturbation));
            let name = format!("cell-{}", &spec_hash[..10]);
            cells.entry(name.clone()).or_insert(CellSpec {
                name: name.clone(),
                adapt,
                use_cmsa,
                perturbation,
            });
            name
        };

    let rows = cfg
        .ablation
        .loss_masks
        .iter()
        .map(|m| {
            (
                m.label(),
                add(
                    AdaptConfig {
                        loss_mask: *m,
                        ..base.clone()
                    },
                    true,
                    None,
                ),
            )
        })
        .collect();
    tables.push(AblationTable {
        name: "loss".into(),
        rows,
    });

    let mut rows = Vec::new();
    let cmsa_options: &[bool] = if cfg.ablation.compare_cmsa {
        &[true, false]
    } else {
        &[true]
    };
    for &use_cmsa in cmsa_options {
        for f in &cfg.ablation.fusions {
            let label = format!("{}{}", f.name(), if use_cmsa { "" } else { "-no-cmsa" });
            rows.push((
                label,
                add(
                    AdaptConfig {
                        fusion: *f,
                        ..base.clone()
                    },
                    use_cmsa,
                    None,
                ),
            ));
        }
    }
    tables.push(AblationTable {
        name: "fusion".into(),
        rows,
    });

    let rows = cfg
        .ablation
        .batch_sizes
        .iter()
        .map(|&b| {
            let label = if b < 2 {
                format!("b{b}-spatial-stats")
            } else {
                format!("b{b}")
            };
            let a = AdaptConfig {
                batch_size: b,
                allow_single_sample: b == 1,
                ..base.clone()
            };
            (label, add(a, true, None))
        })
        .collect();
    tables.push(AblationTable {
        name: "batch".into(),
        rows,
    });

    if cfg.ablation.perturbations {
        let mut rows = vec![("clean".to_string(), add(base.clone(), true, None))];
        for p in cfg.perturbation.all() {
            rows.push((p.name().to_string(), add(base.clone(), true, Some(p))));
        }
        tables.push(AblationTable {
            name: "perturbation".into(),
            rows,
        });
    }

    let rows = cfg
        .ablation
        .regions
        .iter()
        .map(|&r| {
            (
                r.name().to_string(),
                add(
                    AdaptConfig {
                        param_region: r,
                        ..base.clone()
                    },
                    true,
                    None,
                ),
            )
        })
        .collect();
    tables.push(AblationTable {
        name: "region".into(),
        rows,
    });

    (cells.into_values().collect(), tables)
}

fn run_cell(
    spec: &CellSpec,
    suites: (&ModelSuite, Option<&ModelSuite>),
    test: &[ScenePair],
    seed: u64,
) -> CellResult {
    let result = (|| -> Result<RunMetrics> {
        let suite = if spec.use_cmsa {
            suites.0
        } else {
            suites
                .1
                .ok_or(Error::MissingInput("no suite without CMSA was provided"))?
        };
        let data: Vec<ScenePair> = match spec.perturbation {
            Some(p) => test
                .iter()
                .enumerate()
                .map(|(i, s)| perturb(s, p, seed.wrapping_add(i as u64)))
                .collect::<Result<_>>()?,
            None => test.to_vec(),
        };
        Ok(run_adaptation(suite, &data, &spec.adapt, &config_hash(spec))?.metrics)
    })();
    match result {
        Ok(m) => CellResult {
            spec: spec.clone(),
            metrics: Some(m),
            error: None,
        },
        Err(e) => CellResult {
            spec: spec.clone(),
            metrics: None,
            error: Some(e.to_string()),
        },
    }
}

/// Run every cell, at most `jobs` at a time. A failing cell is recorded and the rest continue.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    with_cmsa: &ModelSuite,
    without_cmsa: Option<&ModelSuite>,
    test: &[ScenePair],
) -> AblationReport {
    let (specs, tables) = ablation_plan(cfg);
    let jobs = cfg.ablation.jobs.max(1);
    let seed = cfg.perturbation.seed;
    let mut results: Vec<CellResult> = Vec::with_capacity(specs.len());
    for chunk in specs.chunks(jobs) {
        let chunk_results: Vec<CellResult> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|spec| s.spawn(move || run_cell(spec, (with_cmsa, without_cmsa), test, seed)))
                .collect();
            handles
                .into_iter()
                .zip(chunk)
                .map(|(h, spec)| {
                    h.join().unwrap_or_else(|_| CellResult {
                        spec: spec.clone(),
                        metrics: None,
                        error: Some("cell panicked".into()),
                    })
                })
                .collect()
        });
        results.extend(chunk_results);
    }
    AblationReport {
        cells: results
            .into_iter()
            .map(|r| (r.spec.name.clone(), r))
            .collect(),
        tables,
    }
}

pub const ABLATION_CSV_HEADER: &str =
    "table,row,cell,source_only_miou,pre_adapt_miou,post_adapt_miou,background,road,car,person,bike,flag,error";

fn pct(v: f64) -> String {
    format!("{:.4}", 100.0 * v)
}

pub fn ablation_table_csv(report: &AblationReport, table: &AblationTable) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for (row, cell) in &table.rows {
        let r = &report.cells[cell];
        let mut cols = vec![table.name.clone(), row.clone(), cell.clone()];
        match &r.metrics {
            Some(m) => {
                cols.push(pct(m.source_only.miou()));
                cols.push(pct(m.pre_adapt.miou()));
                cols.push(pct(m.post_adapt.miou()));
                for c in CLASS_NAMES {
                    cols.push(m.post_adapt.iou(None, c).map(pct).unwrap_or_default());
                }
                cols.push(if m.protocol_divergent {
                    "protocol_divergent".into()
                } else {
                    String::new()
                });
                cols.push(String::new());
            }
            None => {
                cols.extend(std::iter::repeat_n(
                    String::new(),
                    3 + CLASS_NAMES.len() + 1,
                ));
                cols.push(r.error.clone().unwrap_or_default().replace(',', ";"));
            }
        }
        out += &cols.join(",");
        out.push('\n');
    }
    out
}

/// Needs `checkpoint`; pretrains the no-CMSA suite under `out` when the comparison is on.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    dataset: &Path,
    checkpoint: &Path,
    no_cmsa_checkpoint: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<AblationReport> {
    cfg.validate()?;
    let with = ModelSuite::load(checkpoint, Some(&cfg.model))?;
    let ds = load_dataset(dataset)?;
    prepare_out_dir(out, force)?;
    let without = if cfg.ablation.compare_cmsa {
        let plain = ModelConfig {
            use_cmsa: false,
            ..cfg.model.clone()
        };
        Some(match no_cmsa_checkpoint {
            Some(p) => ModelSuite::load(p, Some(&plain))?,
            None => {
                let (suite, report) = pretrain_suite(cfg, &plain, &ds)?;
                suite.save(&out.join("no_cmsa_checkpoint"))?;
                write_json(&out.join("no_cmsa_pretrain_metrics.json"), &report)?;
                suite
            }
        })
    } else {
        None
    };
    let report = run_ablation(cfg, &with, without.as_ref(), &ds.target_test);
    write_ablation(&report, out)?;
    Ok(report)
}

pub fn write_ablation(report: &AblationReport, out: &Path) -> Result<()> {
    let tables = out.join("tables");
    fs::create_dir_all(&tables).map_err(|e| Error::io(&tables, e))?;
    for t in &report.tables {
        write_text(
            &tables.join(format!("{}.csv", t.name)),
            &ablation_table_csv(report, t),
        )?;
    }
    let cells = out.join("cells");
    for (name, r) in &report.cells {
        let dir = cells.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&dir.join("cell.json"), r)?;
    }
    write_json(&out.join("ablation.json"), report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsolidatedReport {
    pub class_names: Vec<String>,
    /// Run label (directory name) → metrics.
    pub runs: BTreeMap<String, RunMetrics>,
}

pub const REPORT_CSV_HEADER: &str =
    "run,phase,source,background,road,car,person,bike,miou,pixel_count";

pub fn report_csv(r: &ConsolidatedReport) -> String {
    let names = class_names();
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for (run, m) in &r.runs {
        let mut phases = vec![
            ("source_only", &m.source_only),
            ("pre_adapt", &m.pre_adapt),
            ("post_adapt", &m.post_adapt),
        ];
        if let Some(p) = &m.reestimated {
            phases.push(("reestimated", p));
        }
        for (phase, p) in phases {
            out += &format!("{run},{phase},{}\n", p.teacher.csv_row("teacher", &names));
            for (b, rep) in &p.branches {
                out += &format!("{run},{phase},{}\n", rep.csv_row(b, &names));
            }
        }
    }
    out
}

/// Merge `metrics.json` of each run directory; with `images > 0`, dump that many test
/// scenes as PPM/PGM (input, ground truth, teacher prediction, EEF weight maps).
pub fn cmd_report(
    runs: &[PathBuf],
    out: &Path,
    images: usize,
    force: bool,
) -> Result<ConsolidatedReport> {
    if runs.is_empty() {
        return Err(Error::Config(
            "report needs at least one run directory".into(),
        ));
    }
    let mut merged = ConsolidatedReport {
        class_names: Vec::new(),
        runs: BTreeMap::new(),
    };
    let mut records = Vec::new();
    for dir in runs {
        let m: RunMetrics = read_json(&dir.join("metrics.json"))?;
        if merged.class_names.is_empty() {
            merged.class_names = m.class_names.clone();
        } else if merged.class_names != m.class_names {
            return Err(Error::Config(format!(
                "{} has classes {:?}, expected {:?}",
                dir.display(),
                m.class_names,
                merged.class_names
            )));
        }
        let label = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        if merged.runs.insert(label.clone(), m).is_some() {
            return Err(Error::Config(format!("two runs are both named `{label}`")));
        }
        records.push((label, dir.clone()));
    }
    prepare_out_dir(out, force)?;
    write_json(&out.join("report.json"), &merged)?;
    write_text(&out.join("report.csv"), &report_csv(&merged))?;
    if images > 0 {
        for (label, dir) in &records {
            dump_images(dir, &out.join("images").join(label), images)?;
        }
    }
    Ok(merged)
}

fn dump_images(run_dir: &Path, out: &Path, count: usize) -> Result<()> {
    let record: RunRecord = read_json(&run_dir.join("run_record.json"))?;
    let dataset = record
        .dataset_dir
        .ok_or(Error::MissingInput("run record has no dataset directory"))?;
    let ds = load_dataset(&dataset)?;
    let mut suite = ModelSuite::load(&run_dir.join("after"), None)?;
    let cfg = record.adapt;
    let fusion = cfg.fusion_config();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let scenes = &ds.target_test[..count.min(ds.target_test.len())];
    let loader = batches(scenes, cfg.batch_size)?;
    let (h, w) = (ds.config.height, ds.config.width);
    let plane = h * w;
    let mut k = 0;
    for b in &loader {
        let p = predict_batch(&mut suite, b, BnMode::Adapt, &fusion)?;
        let pred = argmax_labels(&p.teacher);
        let fused = eef_fuse(&p.logits[0], &p.logits[1], &p.logits[2], &fusion)?;
        for n in 0..b.len() {
            let s = &scenes[k];
            let id = format!("test_{k:04}");
            images::write(
                &out.join(format!("{id}_color.ppm")),
                &images::ppm(s.color.data(), h, w),
            )?;
            images::write(
                &out.join(format!("{id}_thermal.pgm")),
                &images::pgm(s.thermal.data(), h, w),
            )?;
            images::write(
                &out.join(format!("{id}_gt.ppm")),
                &label_ppm(&s.label_indices(), &ds.config, h, w),
            )?;
            images::write(
                &out.join(format!("{id}_pred.ppm")),
                &label_ppm(&pred[n * plane..(n + 1) * plane], &ds.config, h, w),
            )?;
            for m in Modality::ALL {
                images::write(
                    &out.join(format!("{id}_weight_{}.pgm", m.name())),
                    &images::pgm(fused.weight_map(m as usize, n), h, w),
                )?;
            }
            k += 1;
        }
    }
    Ok(())
}
