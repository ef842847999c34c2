//! Procedural color/thermal street scenes with a day→night domain shift.
//!
//! A scene is a sky/background band over a road band with 2–5 objects
//! (car, person, bike) drawn as rectangles or ellipses. Day color is the class
//! palette plus texture noise; thermal is the class emissivity, Gaussian
//! blurred. Night darkens color with a power law, compresses it and adds
//! heavy noise, while thermal only gains light noise, so the color gap is the
//! larger one. The palette hides people in night color (their colors collapse
//! onto the road/background after darkening) while bikes keep a bright color
//! but almost no thermal contrast against the road.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::images;
use crate::ntt;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 5] = ["background", "road", "car", "person", "bike"];
pub const BACKGROUND: usize = 0;
pub const ROAD: usize = 1;
pub const CAR: usize = 2;
pub const PERSON: usize = 3;
pub const BIKE: usize = 4;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Day,
    Night,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Power-law exponent applied to night color (`> 1` darkens).
    pub night_gamma: f64,
    /// Multiplicative contrast compression of night color.
    pub night_contrast: f64,
    /// Additive Gaussian noise on night color.
    pub color_noise: f64,
    /// Additive Gaussian noise on night thermal.
    pub thermal_noise: f64,
    /// Per-pixel texture noise on day color.
    pub texture_noise: f64,
    pub thermal_blur_sigma: f64,
    /// Day RGB per class.
    pub palette: [[f64; 3]; 5],
    /// Thermal intensity per class.
    pub emissivity: [f64; 5],
    pub master_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 32,
            width: 32,
            train_count: 200,
            val_count: 50,
            test_count: 100,
            night_gamma: 2.2,
            night_contrast: 0.5,
            color_noise: 0.08,
            thermal_noise: 0.01,
            texture_noise: 0.03,
            thermal_blur_sigma: 1.0,
            palette: [
                [0.35, 0.38, 0.42],
                [0.28, 0.28, 0.30],
                [0.85, 0.20, 0.15],
                [0.20, 0.33, 0.22],
                [0.95, 0.85, 0.10],
            ],
            emissivity: [0.20, 0.40, 0.65, 0.95, 0.41],
            master_seed: 2024,
        }
    }
}

impl GeneratorConfig {
    pub fn classes(&self) -> usize {
        CLASS_NAMES.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "scenes must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.night_gamma <= 1.0 {
            return Err(Error::Config(format!(
                "night_gamma must exceed 1, got {}",
                self.night_gamma
            )));
        }
        if self.color_noise <= self.thermal_noise {
            return Err(Error::Config(format!(
                "color_noise ({}) must exceed thermal_noise ({})",
                self.color_noise, self.thermal_noise
            )));
        }
        for c in [self.train_count, self.val_count, self.test_count] {
            if c == 0 || c >= SPLIT_STRIDE as usize {
                return Err(Error::Config(format!(
                    "split counts must be in 1..{SPLIT_STRIDE}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    /// `3×H×W` in `[0,1]`
    pub color: Tensor,
    /// `1×H×W` in `[0,1]`
    pub thermal: Tensor,
    /// `H×W` class indices stored as reals
    pub labels: Tensor,
    pub domain: Domain,
    pub seed: u64,
}

impl ScenePair {
    pub fn height(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.data().iter().map(|&v| v as usize).collect()
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

struct Object {
    class: usize,
    shape: Shape,
    cy: f64,
    cx: f64,
    hh: f64,
    hw: f64,
    tint: [f64; 3],
    heat: f64,
}

impl Object {
    fn covers(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.hh;
        let dx = (x - self.cx) / self.hw;
        match self.shape {
            Shape::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            Shape::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (2.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with clamped borders.
fn blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    kv * plane[y * w + xx]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    kv * tmp[yy * w + x]
                })
                .sum();
        }
    }
    out
}

/// Render one scene. Geometry and day appearance depend only on `seed`, so the
/// day and night renderings of a seed are pixel-aligned views of one scene.
pub fn generate_scene(cfg: &GeneratorConfig, domain: Domain, seed: u64) -> Result<ScenePair> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let horizon = rng.gen_range((0.35 * h as f64) as usize..=(0.6 * h as f64) as usize);
    let n_objects = rng.gen_range(2..=5);
    let objects: Vec<Object> = (0..n_objects)
        .map(|_| {
            let class = [CAR, PERSON, BIKE][rng.gen_range(0..3)];
            let (hh, hw) = match class {
                CAR => (rng.gen_range(2.5..4.5), rng.gen_range(4.0..7.0)),
                PERSON => (rng.gen_range(4.0..6.5), rng.gen_range(1.5..2.8)),
                _ => (rng.gen_range(2.0..3.5), rng.gen_range(3.0..5.0)),
            };
            let scale = h as f64 / 32.0;
            let (hh, hw) = (hh * scale, hw * w as f64 / 32.0);
            // objects stand on the road band
            let cy = rng.gen_range(horizon as f64..h as f64 - 1.0) - 0.5 * hh;
            let cx = rng.gen_range(0.0..w as f64);
            let shape = if rng.gen_bool(0.5) {
                Shape::Rect
            } else {
                Shape::Ellipse
            };
            let tint = [0, 1, 2].map(|_| rng.gen_range(-0.04..0.04));
            let heat = rng.gen_range(-0.02..0.02);
            Object {
                class,
                shape,
                cy,
                cx,
                hh,
                hw,
                tint,
                heat,
            }
        })
        .collect();

    let plane = h * w;
    let mut labels = vec![0.0; plane];
    let mut color = vec![0.0; 3 * plane];
    let mut heat = vec![0.0; plane];
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            let base = if y < horizon { BACKGROUND } else { ROAD };
            let mut class = base;
            let mut tint = [0.0; 3];
            let mut dheat = 0.0;
            for o in &objects {
                if o.covers(y as f64 + 0.5, x as f64 + 0.5) {
                    class = o.class;
                    tint = o.tint;
                    dheat = o.heat;
                }
            }
            labels[k] = class as f64;
            for c in 0..3 {
                color[c * plane + k] =
                    cfg.palette[class][c] + tint[c] + cfg.texture_noise * unit.sample(&mut rng);
            }
            heat[k] = cfg.emissivity[class] + dheat;
        }
    }
    let mut thermal = blur(&heat, h, w, cfg.thermal_blur_sigma);
    color.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    if domain == Domain::Night {
        let mut night_rng = ChaCha8Rng::seed_from_u64(seed);
        night_rng.set_stream(1);
        for v in color.iter_mut() {
            *v = cfg.night_contrast * v.powf(cfg.night_gamma)
                + cfg.color_noise * unit.sample(&mut night_rng);
        }
        for v in thermal.iter_mut() {
            *v += cfg.thermal_noise * unit.sample(&mut night_rng);
        }
    }
    color.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    thermal.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Ok(ScenePair {
        color: Tensor::new([3, h, w], color)?,
        thermal: Tensor::new([1, h, w], thermal)?,
        labels: Tensor::new([h, w], labels)?,
        domain,
        seed,
    })
}

const SPLIT_STRIDE: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    SourceVal,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::SourceTrain, Split::SourceVal, Split::TargetTest];

    fn prefix(self) -> &'static str {
        match self {
            Split::SourceTrain => "train",
            Split::SourceVal => "val",
            Split::TargetTest => "test",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::TargetTest => Domain::Night,
            _ => Domain::Day,
        }
    }

    fn offset(self) -> u64 {
        match self {
            Split::SourceTrain => 0,
            Split::SourceVal => 1,
            Split::TargetTest => 2,
        }
    }
}

/// Seeds of a split: disjoint blocks of `SPLIT_STRIDE` under the master seed.
pub fn split_seeds(cfg: &GeneratorConfig, split: Split) -> Vec<u64> {
    let count = match split {
        Split::SourceTrain => cfg.train_count,
        Split::SourceVal => cfg.val_count,
        Split::TargetTest => cfg.test_count,
    };
    let base = cfg
        .master_seed
        .wrapping_mul(4 * SPLIT_STRIDE)
        .wrapping_add(split.offset() * SPLIT_STRIDE);
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub source_train: Vec<ScenePair>,
    pub source_val: Vec<ScenePair>,
    pub target_test: Vec<ScenePair>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[ScenePair] {
        match s {
            Split::SourceTrain => &self.source_train,
            Split::SourceVal => &self.source_val,
            Split::TargetTest => &self.target_test,
        }
    }
}

/// Day-only source splits and a night-only target split.
pub fn build_splits(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let gen = |s: Split| -> Result<Vec<ScenePair>> {
        split_seeds(cfg, s)
            .into_iter()
            .map(|seed| generate_scene(cfg, s.domain(), seed))
            .collect()
    };
    Ok(Dataset {
        config: cfg.clone(),
        source_train: gen(Split::SourceTrain)?,
        source_val: gen(Split::SourceVal)?,
        target_test: gen(Split::TargetTest)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Perturbation {
    /// Remove a `rate` border, then resize back to the original size (nearest).
    Crop { rate: f64 },
    /// Multiply color by `factor`.
    Brightness { factor: f64 },
    /// Add Gaussian noise with std `range/255` to both modalities.
    Noise { range: f64 },
}

impl Perturbation {
    pub fn name(&self) -> &'static str {
        match self {
            Perturbation::Crop { .. } => "crop",
            Perturbation::Brightness { .. } => "brightness",
            Perturbation::Noise { .. } => "noise",
        }
    }
}

pub const CROP_RULE: &str = "window = floor(size*(1-rate)), odd sizes rounded up to even; centered; resized back with nearest neighbour";

/// Side of the retained crop window.
pub fn crop_window(size: usize, rate: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "crop rate must be in [0,1), got {rate}"
        )));
    }
    let raw = (size as f64 * (1.0 - rate)).floor() as usize;
    let snapped = (raw + raw % 2).min(size);
    if snapped < 8 {
        return Err(Error::Config(format!("crop leaves {snapped} px (< 8)")));
    }
    Ok(snapped)
}

pub fn perturb(pair: &ScenePair, p: Perturbation, seed: u64) -> Result<ScenePair> {
    let (h, w) = (pair.height(), pair.width());
    let mut out = pair.clone();
    match p {
        Perturbation::Crop { rate } => {
            let (wh, ww) = (crop_window(h, rate)?, crop_window(w, rate)?);
            let (oy, ox) = ((h - wh) / 2, (w - ww) / 2);
            let src = |y: usize, x: usize| (oy + y * wh / h, ox + x * ww / w);
            let resample = |t: &Tensor| -> Tensor {
                let planes = t.numel() / (h * w);
                Tensor::from_fn(t.shape().to_vec(), |k| {
                    let (c, y, x) = (k / (h * w), (k / w) % h, k % w);
                    let (sy, sx) = src(y, x);
                    debug_assert!(c < planes);
                    t.data()[(c * h + sy) * w + sx]
                })
            };
            out.color = resample(&pair.color);
            out.thermal = resample(&pair.thermal);
            out.labels = resample(&pair.labels);
        }
        Perturbation::Brightness { factor } => {
            if !(factor >= 0.0 && factor.is_finite()) {
                return Err(Error::Config(format!(
                    "brightness factor must be >= 0, got {factor}"
                )));
            }
            if factor != 1.0 {
                out.color = pair.color.map(|v| (v * factor).clamp(0.0, 1.0));
            }
        }
        Perturbation::Noise { range } => {
            if !(range >= 0.0 && range.is_finite()) {
                return Err(Error::Config(format!(
                    "noise range must be >= 0, got {range}"
                )));
            }
            let normal = Normal::new(0.0, range / 255.0).expect("finite std");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for t in [&mut out.color, &mut out.thermal] {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub seed: u64,
    pub domain: Domain,
    pub color: FileEntry,
    pub thermal: FileEntry,
    pub labels: FileEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub generator: GeneratorConfig,
    pub class_names: Vec<String>,
    pub crop_rule: String,
    pub splits: BTreeMap<Split, Vec<SampleEntry>>,
}

fn write_tensor(dir: &Path, file: String, t: &Tensor) -> Result<FileEntry> {
    let bytes = ntt::to_bytes(t);
    let path = dir.join(&file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(FileEntry {
        file,
        crc32: crc32fast::hash(&bytes),
    })
}

fn read_tensor(dir: &Path, entry: &FileEntry) -> Result<Tensor> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if crc32fast::hash(&bytes) != entry.crc32 {
        return Err(Error::Checksum(path));
    }
    let (t, used) = ntt::decode(&bytes).map_err(|d| Error::format(&path, d))?;
    if used != bytes.len() {
        return Err(Error::format(&path, "trailing bytes after tensor"));
    }
    Ok(t)
}

/// Write `manifest.json` and one `{id}_{color,thermal,labels}.ntt` triple per sample.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = BTreeMap::new();
    for s in Split::ALL {
        let entries = ds
            .split(s)
            .iter()
            .enumerate()
            .map(|(i, pair)| {
                let id = format!("{}_{i:04}", s.prefix());
                Ok(SampleEntry {
                    color: write_tensor(dir, format!("{id}_color.ntt"), &pair.color)?,
                    thermal: write_tensor(dir, format!("{id}_thermal.ntt"), &pair.thermal)?,
                    labels: write_tensor(dir, format!("{id}_labels.ntt"), &pair.labels)?,
                    id,
                    seed: pair.seed,
                    domain: pair.domain,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        splits.insert(s, entries);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        generator: ds.config.clone(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        crop_rule: CROP_RULE.to_string(),
        splits,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!(
                "format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let load_split = |s: Split| -> Result<Vec<ScenePair>> {
        manifest
            .splits
            .get(&s)
            .map(|v| v.as_slice())
            .unwrap_or_default()
            .iter()
            .map(|e| {
                Ok(ScenePair {
                    color: read_tensor(dir, &e.color)?,
                    thermal: read_tensor(dir, &e.thermal)?,
                    labels: read_tensor(dir, &e.labels)?,
                    domain: e.domain,
                    seed: e.seed,
                })
            })
            .collect()
    };
    Ok(Dataset {
        source_train: load_split(Split::SourceTrain)?,
        source_val: load_split(Split::SourceVal)?,
        target_test: load_split(Split::TargetTest)?,
        config: manifest.generator,
    })
}

/// RGB rendering of a label map using the day palette.
pub fn label_ppm(labels: &[usize], cfg: &GeneratorConfig, h: usize, w: usize) -> Vec<u8> {
    let plane = h * w;
    let mut rgb = vec![0.0; 3 * plane];
    for (k, &l) in labels.iter().enumerate().take(plane) {
        let col = cfg.palette.get(l).copied().unwrap_or([1.0, 1.0, 1.0]);
        for c in 0..3 {
            rgb[c * plane + k] = col[c];
        }
    }
    images::ppm(&rgb, h, w)
}

/// Mini-batch of aligned scenes: `N×3×H×W`, `N×1×H×W` and `N·H·W` labels.
#[derive(Clone, Debug)]
pub struct SceneBatch {
    pub color: Tensor,
    pub thermal: Tensor,
    pub labels: Vec<usize>,
}

impl SceneBatch {
    pub fn from_pairs(pairs: &[ScenePair]) -> Result<Self> {
        let first = pairs.first().ok_or(Error::MissingInput("empty batch"))?;
        let (h, w) = (first.height(), first.width());
        let mut color = Vec::with_capacity(pairs.len() * 3 * h * w);
        let mut thermal = Vec::with_capacity(pairs.len() * h * w);
        let mut labels = Vec::with_capacity(pairs.len() * h * w);
        for p in pairs {
            if p.height() != h || p.width() != w {
                return Err(Error::ShapeMismatch {
                    op: "batch",
                    left: vec![h, w],
                    right: vec![p.height(), p.width()],
                });
            }
            color.extend_from_slice(p.color.data());
            thermal.extend_from_slice(p.thermal.data());
            labels.extend(p.label_indices());
        }
        let n = pairs.len();
        Ok(SceneBatch {
            color: Tensor::new([n, 3, h, w], color)?,
            thermal: Tensor::new([n, 1, h, w], thermal)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.color.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Consecutive batches of `size` (the last one may be shorter).
pub fn batches(pairs: &[ScenePair], size: usize) -> Result<Vec<SceneBatch>> {
    if size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    pairs.chunks(size).map(SceneBatch::from_pairs).collect()
}
