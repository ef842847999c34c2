//! Parameterized layers and the loss used for source pretraining.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{NormStats, Tape, Var};
use crate::tensor::Tensor;

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: usize = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

impl ParamRole {
    pub fn is_bn_affine(self) -> bool {
        matches!(self, ParamRole::BnGamma | ParamRole::BnBeta)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
    pub region: Region,
}

/// How batch-norm layers source their statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Batch statistics; running statistics updated with momentum.
    Train,
    /// Batch statistics; running statistics frozen.
    Adapt,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, Default)]
pub enum Trainable {
    #[default]
    Nothing,
    Everything,
    Names(BTreeSet<String>),
}

impl Trainable {
    pub fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Everything => true,
            Trainable::Names(s) => s.contains(name),
        }
    }
}

/// Per-forward binding of parameters onto a tape.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub mode: BnMode,
    trainable: Trainable,
    bound: Vec<(String, Var<'t>)>,
    overrides: BTreeMap<String, Var<'t>>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, mode: BnMode, trainable: Trainable) -> Self {
        Ctx {
            tape,
            mode,
            trainable,
            bound: Vec::new(),
            overrides: BTreeMap::new(),
        }
    }

    /// Use `v` in place of the stored value of the parameter called `name`.
    pub fn override_param(&mut self, name: &str, v: Var<'t>) {
        self.overrides.insert(name.to_string(), v);
    }

    /// Record `p` on the tape, as a differentiable leaf when it is trainable.
    pub fn param(&mut self, p: &Param) -> Var<'t> {
        if let Some(&v) = self.overrides.get(&p.name) {
            return v;
        }
        if self.trainable.contains(&p.name) {
            let v = self.tape.leaf(p.value.clone());
            self.bound.push((p.name.clone(), v));
            v
        } else {
            self.tape.constant(p.value.clone())
        }
    }

    /// Trainable parameters bound so far, in binding order.
    pub fn bindings(&self) -> &[(String, Var<'t>)] {
        &self.bound
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        region: Region,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Conv2d {
            weight: Param {
                name: format!("{name}.weight"),
                value: he_normal(&[out_c, in_c, kernel, kernel], in_c * kernel * kernel, rng),
                role: ParamRole::Weight,
                region,
            },
            bias: Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros([out_c]),
                role: ParamRole::Bias,
                region,
            },
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != self.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                left: xs,
                right: self.weight.value.shape().to_vec(),
            });
        }
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        x.conv2d(w, Some(b), self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    pub name: String,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(name: &str, region: Region, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param {
                name: format!("{name}.gamma"),
                value: Tensor::ones([channels]),
                role: ParamRole::BnGamma,
                region,
            },
            beta: Param {
                name: format!("{name}.beta"),
                value: Tensor::zeros([channels]),
                role: ParamRole::BnBeta,
                region,
            },
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
            name: name.to_string(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    /// Normalize `x`; in [`BnMode::Train`] this also moves the running statistics.
    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let g = ctx.param(&self.gamma);
        let b = ctx.param(&self.beta);
        match ctx.mode {
            BnMode::Eval => {
                let (y, _) = x.batch_norm(
                    g,
                    b,
                    NormStats::Fixed {
                        mean: self.running_mean.data(),
                        var: self.running_var.data(),
                    },
                    self.eps,
                )?;
                Ok(y)
            }
            BnMode::Adapt => Ok(x.batch_norm(g, b, NormStats::Batch, self.eps)?.0),
            BnMode::Train => {
                let (y, moments) = x.batch_norm(g, b, NormStats::Batch, self.eps)?;
                let m = moments.expect("batch statistics were computed");
                let unbias = m.count as f64 / (m.count as f64 - 1.0);
                let mom = self.momentum;
                for (r, v) in self.running_mean.data_mut().iter_mut().zip(&m.mean) {
                    *r = (1.0 - mom) * *r + mom * v;
                }
                for (r, v) in self.running_var.data_mut().iter_mut().zip(&m.var) {
                    *r = (1.0 - mom) * *r + mom * v * unbias;
                }
                Ok(y)
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{}.running_mean", self.name), &self.running_mean),
            (format!("{}.running_var", self.name), &self.running_var),
        ]
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            (
                format!("{}.running_mean", self.name),
                &mut self.running_mean,
            ),
            (format!("{}.running_var", self.name), &mut self.running_var),
        ]
    }

    /// Back to the freshly constructed statistics (mean 0, variance 1).
    pub fn reset_running_stats(&mut self) {
        self.running_mean.data_mut().fill(0.0);
        self.running_var.data_mut().fill(1.0);
    }
}

/// Fully connected layer: `y = x·Wᵀ + b` for `x: N×in`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new(
        name: &str,
        region: Region,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Dense {
            weight: Param {
                name: format!("{name}.weight"),
                value: he_normal(&[output, input], input, rng),
                role: ParamRole::Weight,
                region,
            },
            bias: Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros([output]),
                role: ParamRole::Bias,
                region,
            },
        }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        x.matmul(w.transpose()?)?.add(b)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn activate(kind: Activation, x: Var<'_>) -> Var<'_> {
    match kind {
        Activation::Relu => x.relu(),
        Activation::Sigmoid => x.sigmoid(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    MaxPool2,
    GlobalMaxPool,
    NearestUpsample2,
}

pub fn pool_and_resize(kind: Resize, x: Var<'_>) -> Result<Var<'_>> {
    match kind {
        Resize::MaxPool2 => x.maxpool2(),
        Resize::GlobalMaxPool => x.max(&[2, 3], true),
        Resize::NearestUpsample2 => x.upsample2(),
    }
}

pub fn log_softmax(x: Var<'_>, axis: usize) -> Result<Var<'_>> {
    x.log_softmax(axis)
}

/// Mean pixel cross-entropy of `N×C×H×W` logits against `N·H·W` labels.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    logits.log_softmax(1)?.nll(labels, IGNORE_LABEL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_mode_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new("bn", Region::Encoder, 2);
        bn.running_mean = Tensor::vector(&[0.3, -0.1]);
        bn.running_var = Tensor::vector(&[2.0, 0.5]);
        let x = Tensor::from_fn([2, 2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let run = |bn: &mut BatchNorm2d| {
            let tape = Tape::new();
            let mut ctx = Ctx::new(&tape, BnMode::Eval, Trainable::Nothing);
            let xv = tape.constant(x.clone());
            bn.forward(&mut ctx, xv).unwrap().tensor()
        };
        let a = run(&mut bn);
        let b = run(&mut bn);
        assert!(a.bit_eq(&b));
        assert_eq!(bn.running_mean.data(), &[0.3, -0.1]);
        assert_eq!(bn.running_var.data(), &[2.0, 0.5]);
    }

    #[test]
    fn train_mode_moves_running_stats_adapt_does_not() {
        let x = Tensor::from_fn([2, 1, 2, 2], |i| i as f64);
        let mut bn = BatchNorm2d::new("bn", Region::Decoder, 1);
        for (mode, moved) in [(BnMode::Adapt, false), (BnMode::Train, true)] {
            let before = bn.running_mean.clone();
            let tape = Tape::new();
            let mut ctx = Ctx::new(&tape, mode, Trainable::Nothing);
            bn.forward(&mut ctx, tape.constant(x.clone())).unwrap();
            assert_eq!(!bn.running_mean.bit_eq(&before), moved);
        }
        // mean of 0..8 is 3.5, unbiased variance 6
        assert!((bn.running_mean.data()[0] - 0.35).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.6)).abs() < 1e-12);
    }
}
