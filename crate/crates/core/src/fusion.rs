//! Element-wise entropy-based fusion (EEF) of the three branch logits into
//! teacher logits, plus the mean (`merge`) and image-level entropy (`ie`)
//! baselines.
//!
//! Per pixel, branch `i` gets weight
//! `W_i = exp((1 − H_i)/temp) / Σ_j exp((1 − H_j)/temp)` where `H_i` is the
//! Shannon entropy `−Σ_c p_c ln p_c` of its channel softmax, and the teacher is
//! `Σ_i W_i ⊙ y_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Eef,
    Merge,
    Ie,
}

impl FusionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Eef => "eef",
            FusionStrategy::Merge => "merge",
            FusionStrategy::Ie => "ie",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub temp: f64,
    pub strategy: FusionStrategy,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            temp: 2.0,
            strategy: FusionStrategy::Eef,
        }
    }
}

fn check_temp(temp: f64) -> Result<()> {
    if !(temp > 0.0 && temp.is_finite()) {
        return Err(Error::Domain {
            op: "eef_weights",
            detail: format!("temperature must be positive and finite, got {temp}"),
        });
    }
    Ok(())
}

/// Channel-softmax Shannon entropy per pixel: `N×C×H×W → N×1×H×W`.
pub fn pixel_entropy(logits: Var<'_>) -> Result<Var<'_>> {
    let lp = logits.log_softmax(1)?;
    Ok(lp.exp().mul(lp)?.sum(&[1], true)?.neg())
}

/// Temperature softmax of `1 − H_i` across the three branches.
pub fn eef_weights<'t>(entropies: [Var<'t>; 3], temp: f64) -> Result<[Var<'t>; 3]> {
    check_temp(temp)?;
    let shape = entropies[0].shape();
    for e in &entropies[1..] {
        if e.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "eef_weights",
                left: shape,
                right: e.shape(),
            });
        }
    }
    let tape = entropies[0].tape();
    let logits = entropies.map(|h| h.neg().add_scalar(1.0).mul_scalar(1.0 / temp));
    // The per-pixel max is a constant shift, which leaves the softmax and its gradient unchanged.
    let vals: Vec<Tensor> = logits.iter().map(|v| v.tensor()).collect();
    let peak = Tensor::from_fn(shape.clone(), |k| {
        vals.iter()
            .map(|v| v.data()[k])
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let peak = tape.constant(peak);
    let mut exps = Vec::with_capacity(3);
    for l in logits {
        exps.push(l.sub(peak)?.exp());
    }
    let total = exps[0].add(exps[1])?.add(exps[2])?;
    Ok([
        exps[0].div(total)?,
        exps[1].div(total)?,
        exps[2].div(total)?,
    ])
}

/// Fusion result on the tape.
pub struct FusionVars<'t> {
    /// Broadcastable against `N×1×H×W` (per-image `N×1×1×1` for `ie`).
    pub weights: [Var<'t>; 3],
    pub teacher: Var<'t>,
    pub entropies: [Var<'t>; 3],
}

pub fn fuse<'t>(logits: [Var<'t>; 3], cfg: &FusionConfig) -> Result<FusionVars<'t>> {
    let shape = logits[0].shape();
    for y in &logits[1..] {
        if y.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "eef_fuse",
                left: shape,
                right: y.shape(),
            });
        }
    }
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "eef_fuse",
            left: shape,
            right: vec![0, 0, 0, 0],
        });
    }
    let tape = logits[0].tape();
    let entropies = [
        pixel_entropy(logits[0])?,
        pixel_entropy(logits[1])?,
        pixel_entropy(logits[2])?,
    ];
    let weights = match cfg.strategy {
        FusionStrategy::Eef => eef_weights(entropies, cfg.temp)?,
        FusionStrategy::Merge => {
            check_temp(cfg.temp)?;
            let third = Tensor::full([shape[0], 1, shape[2], shape[3]], 1.0 / 3.0);
            [0, 1, 2].map(|_| tape.constant(third.clone()))
        }
        FusionStrategy::Ie => {
            let per_image = [
                entropies[0].mean(&[2, 3], true)?,
                entropies[1].mean(&[2, 3], true)?,
                entropies[2].mean(&[2, 3], true)?,
            ];
            eef_weights(per_image, cfg.temp)?
        }
    };
    let mut teacher = weights[0].mul(logits[0])?;
    for i in 1..3 {
        teacher = teacher.add(weights[i].mul(logits[i])?)?;
    }
    Ok(FusionVars {
        weights,
        teacher,
        entropies,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    /// `3×N×H×W`
    pub weights: Tensor,
    /// `N×C×H×W`
    pub teacher_logits: Tensor,
    /// `3×N×H×W`
    pub per_branch_entropy: Tensor,
}

fn stack_maps(maps: &[Tensor], n: usize, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(3 * n * h * w);
    for m in maps {
        let full = crate::tensor::expand_to(m, &[n, 1, h, w]);
        data.extend_from_slice(full.data());
    }
    Tensor::new([maps.len(), n, h, w], data).expect("stacked sizes agree")
}

impl FusionOutput {
    pub fn from_vars(v: &FusionVars<'_>) -> Self {
        let teacher = v.teacher.tensor();
        let s = teacher.shape();
        let (n, h, w) = (s[0], s[2], s[3]);
        let weights: Vec<Tensor> = v.weights.iter().map(|x| x.tensor()).collect();
        let ent: Vec<Tensor> = v.entropies.iter().map(|x| x.tensor()).collect();
        FusionOutput {
            weights: stack_maps(&weights, n, h, w),
            per_branch_entropy: stack_maps(&ent, n, h, w),
            teacher_logits: teacher,
        }
    }

    /// Weight map of `branch` for sample `n`, row-major `H×W`.
    pub fn weight_map(&self, branch: usize, n: usize) -> &[f64] {
        let s = self.weights.shape();
        let plane = s[2] * s[3];
        let off = (branch * s[1] + n) * plane;
        &self.weights.data()[off..off + plane]
    }
}

/// Fuse plain logits (no gradient tracking).
pub fn eef_fuse(y1: &Tensor, y2: &Tensor, y3: &Tensor, cfg: &FusionConfig) -> Result<FusionOutput> {
    let tape = Tape::new();
    let vars = [y1, y2, y3].map(|y| tape.constant(y.clone()));
    Ok(FusionOutput::from_vars(&fuse(vars, cfg)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Gradients reach the branch logits through both `W_i` and `y_i`.
    Full,
    /// The teacher is a constant.
    StopTeacher,
}

pub fn fusion_gradient_mode(teacher: Var<'_>, mode: GradientMode) -> Var<'_> {
    match mode {
        GradientMode::Full => teacher,
        GradientMode::StopTeacher => teacher.detach(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_positive_temperature_is_rejected() {
        let y = Tensor::zeros([1, 2, 1, 1]);
        for temp in [0.0, -1.0, f64::NAN] {
            let cfg = FusionConfig {
                temp,
                strategy: FusionStrategy::Eef,
            };
            assert!(matches!(
                eef_fuse(&y, &y, &y, &cfg),
                Err(Error::Domain { .. })
            ));
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = Tensor::zeros([1, 2, 2, 2]);
        let b = Tensor::zeros([1, 3, 2, 2]);
        assert!(matches!(
            eef_fuse(&a, &b, &a, &FusionConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
