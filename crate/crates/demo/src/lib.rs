//! Browser demo: scene generation, EEF weight maps, and dynamic branch weights.
//!
//! The branch logits are simulated from the ground truth so the page needs no
//! checkpoint: each branch is confident on the classes its modality sees well
//! at night (thermal on people, color on bikes) and noisy elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use ttalab::fusion::{eef_fuse, FusionConfig, FusionStrategy};
use ttalab::synth::{generate_scene, Domain, GeneratorConfig, ScenePair};
use ttalab::tensor::Tensor;
use ttalab::tta::{argmax_labels, branch_distance, dynamic_weights};
use wasm_bindgen::prelude::*;

pub const SIZE: usize = 32;

/// Per-branch confidence on the true class, indexed [branch][class].
const CONFIDENCE: [[f64; 5]; 3] = [
    // color: weak on people at night
    [2.5, 2.5, 3.0, 0.3, 4.0],
    // thermal: bikes blend into the road
    [3.0, 2.0, 2.5, 4.5, 0.3],
    // interaction
    [3.0, 3.0, 3.0, 2.5, 2.5],
];
const LOGIT_NOISE: f64 = 1.0;

fn scene(seed: u64, night: bool) -> ScenePair {
    let cfg = GeneratorConfig::default();
    let domain = if night { Domain::Night } else { Domain::Day };
    generate_scene(&cfg, domain, seed).expect("default generator config is valid")
}

/// Simulated `1×5×H×W` logits of the three branches.
pub fn simulated_logits(pair: &ScenePair, seed: u64) -> [Tensor; 3] {
    let labels = pair.label_indices();
    let plane = labels.len();
    let (h, w) = (pair.height(), pair.width());
    let normal = Normal::new(0.0, LOGIT_NOISE).expect("positive std");
    [0usize, 1, 2].map(|b| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64 + 1);
        Tensor::from_fn([1, 5, h, w], |k| {
            let (c, p) = (k / plane, k % plane);
            let boost = if labels[p] == c {
                CONFIDENCE[b][c]
            } else {
                0.0
            };
            boost + normal.sample(&mut rng)
        })
    })
}

fn rgba_from_planar(rgb: &[f64], plane: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * plane);
    for k in 0..plane {
        for c in 0..3 {
            out.push((rgb[c * plane + k].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

fn rgba_from_gray(v: &[f64]) -> Vec<u8> {
    v.iter()
        .flat_map(|&x| {
            let g = (x.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

fn rgba_from_labels(labels: &[usize]) -> Vec<u8> {
    let palette = GeneratorConfig::default().palette;
    let rgb: Vec<f64> = (0..3)
        .flat_map(|c| labels.iter().map(move |&l| palette[l][c]))
        .collect();
    rgba_from_planar(&rgb, labels.len())
}

/// RGBA images of one generated scene.
#[wasm_bindgen]
pub struct SceneView {
    color: Vec<u8>,
    thermal: Vec<u8>,
    labels: Vec<u8>,
}

#[wasm_bindgen]
impl SceneView {
    pub fn color(&self) -> Vec<u8> {
        self.color.clone()
    }
    pub fn thermal(&self) -> Vec<u8> {
        self.thermal.clone()
    }
    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }
}

#[wasm_bindgen]
pub fn size() -> usize {
    SIZE
}

#[wasm_bindgen]
pub fn render_scene(seed: u32, night: bool) -> SceneView {
    let s = scene(seed as u64, night);
    let plane = SIZE * SIZE;
    SceneView {
        color: rgba_from_planar(s.color.data(), plane),
        thermal: rgba_from_gray(s.thermal.data()),
        labels: rgba_from_labels(&s.label_indices()),
    }
}

/// Fusion of the simulated branches of one night scene.
#[wasm_bindgen]
pub struct FusionView {
    weights: [Vec<u8>; 3],
    teacher: Vec<u8>,
    branch_pixel_acc: Vec<f64>,
    teacher_pixel_acc: f64,
}

#[wasm_bindgen]
impl FusionView {
    /// RGBA weight map of `branch` (0 color, 1 thermal, 2 interaction).
    pub fn weights(&self, branch: usize) -> Vec<u8> {
        self.weights[branch.min(2)].clone()
    }
    pub fn teacher(&self) -> Vec<u8> {
        self.teacher.clone()
    }
    pub fn branch_pixel_acc(&self) -> Vec<f64> {
        self.branch_pixel_acc.clone()
    }
    pub fn teacher_pixel_acc(&self) -> f64 {
        self.teacher_pixel_acc
    }
}

fn pixel_acc(pred: &[usize], gt: &[usize]) -> f64 {
    pred.iter().zip(gt).filter(|(a, b)| a == b).count() as f64 / gt.len() as f64
}

pub fn parse_strategy(name: &str) -> FusionStrategy {
    match name {
        "merge" => FusionStrategy::Merge,
        "ie" => FusionStrategy::Ie,
        _ => FusionStrategy::Eef,
    }
}

fn js(e: ttalab::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn fuse_scene(seed: u32, temp: f64, strategy: &str) -> Result<FusionView, JsError> {
    fusion_view(seed as u64, temp, parse_strategy(strategy)).map_err(js)
}

pub fn fusion_view(seed: u64, temp: f64, strategy: FusionStrategy) -> ttalab::Result<FusionView> {
    let s = scene(seed, true);
    let logits = simulated_logits(&s, seed);
    let cfg = FusionConfig { temp, strategy };
    let out = eef_fuse(&logits[0], &logits[1], &logits[2], &cfg)?;
    let gt = s.label_indices();
    let teacher = argmax_labels(&out.teacher_logits);
    Ok(FusionView {
        weights: [0, 1, 2].map(|b| rgba_from_gray(out.weight_map(b, 0))),
        teacher: rgba_from_labels(&teacher),
        branch_pixel_acc: logits
            .iter()
            .map(|l| pixel_acc(&argmax_labels(l), &gt))
            .collect(),
        teacher_pixel_acc: pixel_acc(&teacher, &gt),
    })
}

/// `[D1, D2, D3, ω1, ω2, ω3]` for the simulated branches of one night scene.
#[wasm_bindgen]
pub fn branch_weights(seed: u32, temp: f64) -> Result<Vec<f64>, JsError> {
    distances_and_weights(seed as u64, temp)
        .map(|(d, w)| d.into_iter().chain(w).collect())
        .map_err(js)
}

pub fn distances_and_weights(seed: u64, temp: f64) -> ttalab::Result<([f64; 3], [f64; 3])> {
    let s = scene(seed, true);
    let logits = simulated_logits(&s, seed);
    let cfg = FusionConfig {
        temp,
        strategy: FusionStrategy::Eef,
    };
    let out = eef_fuse(&logits[0], &logits[1], &logits[2], &cfg)?;
    let mut d = [0.0; 3];
    for i in 0..3 {
        d[i] = branch_distance(&logits[i], &out.teacher_logits)?;
    }
    Ok((d, dynamic_weights(d)?))
}
