//! Test-time adaptation: entropy, ensemble and distillation losses with
//! per-branch dynamic weights, applied to batch-norm affine parameters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse, pixel_entropy, FusionConfig, FusionStrategy, FusionVars};
use crate::metrics::ConfusionMatrix;
use crate::models::{BranchInputs, Modality, ModelSuite, ParamSubset, RegionSelect};
use crate::nn::{BnMode, Ctx, Param, Trainable};
use crate::synth::{SceneBatch, ScenePair};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Below this the branch distances carry no reweighting signal.
pub const OMEGA_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossMask {
    /// Per-branch entropy `L_i`.
    pub entropy: bool,
    /// Entropy of the fused teacher `L_EN`.
    pub ensemble: bool,
    /// Teacher-to-student distillation `KL_i`.
    pub kl: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        LossMask {
            entropy: true,
            ensemble: true,
            kl: true,
        }
    }
}

impl LossMask {
    pub const NONE: LossMask = LossMask {
        entropy: false,
        ensemble: false,
        kl: false,
    };

    /// Short label such as `ent+en+kl`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.entropy, "ent"),
            (self.ensemble, "en"),
            (self.kl, "kl"),
        ]
        .iter()
        .filter(|p| p.0)
        .map(|p| p.1)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub lr: f64,
    pub temp: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub param_region: RegionSelect,
    pub loss_mask: LossMask,
    pub dynamic_weighting: bool,
    pub optimizer: OptimizerKind,
    pub fusion: FusionStrategy,
    /// Re-estimate BN running statistics on the target data after adapting
    /// and evaluate with them instead of per-batch statistics.
    pub reset_running_stats: bool,
    /// Permit `batch_size = 1` (statistics over the spatial extent only).
    pub allow_single_sample: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lr: 1e-5,
            temp: 2.0,
            lambda1: 1.0,
            lambda2: 1.0,
            batch_size: 8,
            epochs: 1,
            param_region: RegionSelect::Decoder,
            loss_mask: LossMask::default(),
            dynamic_weighting: true,
            optimizer: OptimizerKind::Sgd,
            fusion: FusionStrategy::Eef,
            reset_running_stats: false,
            allow_single_sample: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it is the no-op reference run
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "adapt.lr must be >= 0, got {}",
                self.lr
            )));
        }
        if !(self.temp > 0.0 && self.temp.is_finite()) {
            return Err(Error::Config(format!(
                "adapt.temp must be > 0, got {}",
                self.temp
            )));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("adapt.lambda1/lambda2 must be >= 0".into()));
        }
        if self.batch_size < 2 && !(self.batch_size == 1 && self.allow_single_sample) {
            return Err(Error::Config(format!(
                "adapt.batch_size must be >= 2 for batch statistics, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("adapt.epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            temp: self.temp,
            strategy: self.fusion,
        }
    }
}

/// Mean per-pixel channel entropy.
pub fn shannon_loss(logits: Var<'_>) -> Result<Var<'_>> {
    Ok(pixel_entropy(logits)?.mean_all())
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

/// Mean over pixels of `KL(p_teacher ‖ p_student)`; no gradient reaches the teacher.
pub fn kl_to_teacher<'t>(student: Var<'t>, teacher: Var<'t>) -> Result<Var<'t>> {
    check_same("kl_to_teacher", &student.shape(), &teacher.shape())?;
    let lt = teacher.detach().log_softmax(1)?;
    let ls = student.log_softmax(1)?;
    Ok(lt.exp().mul(lt.sub(ls)?)?.sum(&[1], true)?.mean_all())
}

/// Log-softmax over axis 1 of an `N×C×…` tensor.
pub fn channel_log_softmax(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut out = t.clone();
    let d = out.data_mut();
    for b in 0..n {
        for k in 0..inner {
            let idx = |ch: usize| (b * c + ch) * inner + k;
            let m = (0..c)
                .map(|ch| d[idx(ch)])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|ch| (d[idx(ch)] - m).exp()).sum::<f64>().ln();
            for ch in 0..c {
                d[idx(ch)] -= lse;
            }
        }
    }
    out
}

/// Symmetric KL between branch and teacher distributions, averaged over the
/// pixels of each sample and then over the batch.
pub fn branch_distance(branch: &Tensor, teacher: &Tensor) -> Result<f64> {
    check_same("branch_distance", branch.shape(), teacher.shape())?;
    let s = branch.shape();
    if s.len() < 2 || s[0] == 0 {
        return Err(Error::EmptyMean("branch_distance on an empty batch"));
    }
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let (lb, lt) = (channel_log_softmax(branch), channel_log_softmax(teacher));
    let (lb, lt) = (lb.data(), lt.data());
    let mut total = 0.0;
    for b in 0..n {
        let mut per_sample = 0.0;
        for k in 0..inner {
            for ch in 0..c {
                let i = (b * c + ch) * inner + k;
                // ½[p ln(p/q) + q ln(q/p)] = ½ (p − q)(ln p − ln q)
                per_sample += 0.5 * (lt[i].exp() - lb[i].exp()) * (lt[i] - lb[i]);
            }
        }
        total += per_sample / inner as f64;
    }
    Ok(total / n as f64)
}

/// `ω_i = D_i / min_j D_j`, or all ones when the minimum is (near) zero.
pub fn dynamic_weights(d: [f64; 3]) -> Result<[f64; 3]> {
    if d.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Domain {
            op: "dynamic_weights",
            detail: format!("distances must be nonnegative, got {d:?}"),
        });
    }
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    if min < OMEGA_EPS {
        return Ok([1.0; 3]);
    }
    Ok(d.map(|v| v / min))
}

/// Unweighted values of the seven loss terms; disabled ones read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub entropy: [f64; 3],
    pub ensemble: f64,
    pub kl: [f64; 3],
}

pub struct Objective<'t> {
    pub total: Var<'t>,
    pub terms: LossTerms,
}

/// `Σ ω_i L_i + λ1 L_EN + λ2 Σ ω_i KL_i`, with only the enabled families present.
pub fn tta_objective<'t>(
    logits: [Var<'t>; 3],
    fusion: &FusionVars<'t>,
    cfg: &AdaptConfig,
    omega: [f64; 3],
) -> Result<Objective<'t>> {
    let tape = logits[0].tape();
    let mut terms = LossTerms::default();
    let mut parts: Vec<Var<'t>> = Vec::new();
    let m = cfg.loss_mask;
    if m.entropy {
        for i in 0..3 {
            let l = shannon_loss(logits[i])?;
            terms.entropy[i] = l.value().item()?;
            parts.push(l.mul_scalar(omega[i]));
        }
    }
    if m.ensemble {
        let l = shannon_loss(fusion.teacher)?;
        terms.ensemble = l.value().item()?;
        parts.push(l.mul_scalar(cfg.lambda1));
    }
    if m.kl {
        for i in 0..3 {
            let l = kl_to_teacher(logits[i], fusion.teacher)?;
            terms.kl[i] = l.value().item()?;
            parts.push(l.mul_scalar(cfg.lambda2 * omega[i]));
        }
    }
    let mut total = match parts.first() {
        Some(&p) => p,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    for &p in parts.iter().skip(1) {
        total = total.add(p)?;
    }
    Ok(Objective { total, terms })
}

/// Recompute the objective total from its terms.
pub fn recombine(terms: &LossTerms, cfg: &AdaptConfig, omega: [f64; 3]) -> f64 {
    let mut t = 0.0;
    if cfg.loss_mask.entropy {
        for i in 0..3 {
            t += omega[i] * terms.entropy[i];
        }
    }
    if cfg.loss_mask.ensemble {
        t += cfg.lambda1 * terms.ensemble;
    }
    if cfg.loss_mask.kl {
        for i in 0..3 {
            t += cfg.lambda2 * omega[i] * terms.kl[i];
        }
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    #[serde(skip)]
    slots: BTreeMap<String, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            lr,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            ..Optimizer::sgd(lr, 0.0)
        }
    }

    /// Update every parameter that has an entry in `grads`; the rest are untouched.
    pub fn step(&mut self, params: Vec<&mut Param>, grads: &BTreeMap<String, Tensor>) {
        self.steps += 1;
        let t = self.steps as i32;
        for p in params {
            let Some(g) = grads.get(&p.name) else {
                continue;
            };
            match self.kind {
                OptimizerKind::Sgd if self.momentum == 0.0 => {
                    for (w, gv) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * gv;
                    }
                }
                OptimizerKind::Sgd => {
                    let (v, _) = self
                        .slots
                        .entry(p.name.clone())
                        .or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros([0])));
                    for ((w, vv), gv) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *vv = self.momentum * *vv + gv;
                        *w -= self.lr * *vv;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self.slots.entry(p.name.clone()).or_insert_with(|| {
                        (
                            Tensor::zeros(g.shape().to_vec()),
                            Tensor::zeros(g.shape().to_vec()),
                        )
                    });
                    let (b1, b2) = (self.beta1, self.beta2);
                    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                    for (((w, mm), vv), gv) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mm = b1 * *mm + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        *w -= self.lr * (*mm / c1) / ((*vv / c2).sqrt() + self.eps);
                    }
                }
            }
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// One line of the adaptation log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "L2")]
    pub l2: f64,
    #[serde(rename = "L3")]
    pub l3: f64,
    #[serde(rename = "L_EN")]
    pub l_en: f64,
    #[serde(rename = "KL1")]
    pub kl1: f64,
    #[serde(rename = "KL2")]
    pub kl2: f64,
    #[serde(rename = "KL3")]
    pub kl3: f64,
    #[serde(rename = "ω1")]
    pub w1: f64,
    #[serde(rename = "ω2")]
    pub w2: f64,
    #[serde(rename = "ω3")]
    pub w3: f64,
    #[serde(rename = "D1")]
    pub d1: f64,
    #[serde(rename = "D2")]
    pub d2: f64,
    #[serde(rename = "D3")]
    pub d3: f64,
}

impl StepRecord {
    fn new(step: usize, total: f64, t: &LossTerms, omega: [f64; 3], d: [f64; 3]) -> Self {
        StepRecord {
            step,
            total,
            l1: t.entropy[0],
            l2: t.entropy[1],
            l3: t.entropy[2],
            l_en: t.ensemble,
            kl1: t.kl[0],
            kl2: t.kl[1],
            kl3: t.kl[2],
            w1: omega[0],
            w2: omega[1],
            w3: omega[2],
            d1: d[0],
            d2: d[1],
            d3: d[2],
        }
    }

    pub fn omega(&self) -> [f64; 3] {
        [self.w1, self.w2, self.w3]
    }
}

pub struct AdaptationState {
    /// Names of the BN affine parameters being updated, across all branches.
    pub trainable: BTreeSet<String>,
    pub optimizer: Optimizer,
    pub step: usize,
    pub log: Vec<StepRecord>,
    pub omega: [f64; 3],
}

impl AdaptationState {
    pub fn new(suite: &ModelSuite, cfg: &AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        let trainable = adaptable_params(suite, cfg.param_region);
        let optimizer = match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::sgd(cfg.lr, 0.0),
            OptimizerKind::Adam => Optimizer::adam(cfg.lr),
        };
        Ok(AdaptationState {
            trainable,
            optimizer,
            step: 0,
            log: Vec::new(),
            omega: [1.0; 3],
        })
    }

    /// JSON-lines rendering of the step log.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

/// BN gamma/beta names of all three branches inside `region`.
pub fn adaptable_params(suite: &ModelSuite, region: RegionSelect) -> BTreeSet<String> {
    suite
        .branches
        .iter()
        .flat_map(|b| b.collect_params(ParamSubset::BnAffineOnly, region))
        .map(|p| p.name.clone())
        .collect()
}

/// One forward/backward/update on `batch`.
pub fn adapt_step(
    suite: &mut ModelSuite,
    batch: &SceneBatch,
    cfg: &AdaptConfig,
    state: &mut AdaptationState,
) -> Result<StepRecord> {
    let tape = Tape::new();
    let mut ctx = Ctx::new(
        &tape,
        BnMode::Adapt,
        Trainable::Names(state.trainable.clone()),
    );
    let inputs = BranchInputs {
        color: tape.constant(batch.color.clone()),
        thermal: tape.constant(batch.thermal.clone()),
    };
    let logits = suite.forward_all(&mut ctx, &inputs)?;
    let fusion = fuse(logits, &cfg.fusion_config())?;
    let teacher = fusion.teacher.tensor();
    let mut d = [0.0; 3];
    for i in 0..3 {
        d[i] = branch_distance(&logits[i].value(), &teacher)?;
    }
    let omega = if cfg.dynamic_weighting {
        dynamic_weights(d)?
    } else {
        [1.0; 3]
    };
    let objective = tta_objective(logits, &fusion, cfg, omega)?;
    let total = objective.total.value().item()?;
    if !total.is_finite() {
        return Err(Error::Diverged(format!(
            "adaptation loss {total} at step {}",
            state.step
        )));
    }
    let grads = tape.backward(objective.total)?;
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, v) in ctx.bindings() {
        if let Some(g) = grads.get(*v) {
            match by_name.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    by_name.insert(name.clone(), g.clone());
                }
            }
        }
    }
    state.optimizer.step(suite.params_mut(), &by_name);
    let record = StepRecord::new(state.step, total, &objective.terms, omega, d);
    state.step += 1;
    state.omega = omega;
    state.log.push(record.clone());
    Ok(record)
}

/// Run `cfg.epochs` passes over `batches`.
pub fn adapt_epoch(
    suite: &mut ModelSuite,
    batches: &[SceneBatch],
    cfg: &AdaptConfig,
) -> Result<AdaptationState> {
    let mut state = AdaptationState::new(suite, cfg)?;
    if batches.is_empty() {
        return Err(Error::MissingInput("adaptation needs at least one batch"));
    }
    for _ in 0..cfg.epochs {
        for b in batches {
            adapt_step(suite, b, cfg, &mut state)?;
        }
    }
    Ok(state)
}

/// Reset BN running statistics and re-estimate them as a cumulative average over `batches`.
pub fn reestimate_running_stats(suite: &mut ModelSuite, batches: &[SceneBatch]) -> Result<()> {
    let saved: Vec<f64> = suite.batch_norms_mut().map(|bn| bn.momentum).collect();
    for bn in suite.batch_norms_mut() {
        bn.reset_running_stats();
    }
    for (k, b) in batches.iter().enumerate() {
        for bn in suite.batch_norms_mut() {
            bn.momentum = 1.0 / (k + 1) as f64;
        }
        suite.infer(&b.color, &b.thermal, BnMode::Train)?;
    }
    for (bn, m) in suite.batch_norms_mut().zip(saved) {
        bn.momentum = m;
    }
    Ok(())
}

/// Channel argmax of `N×C×H×W` logits; ties go to the lower class index.
pub fn argmax_labels(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let d = logits.data();
    let mut out = Vec::with_capacity(n * inner);
    for b in 0..n {
        for k in 0..inner {
            let mut best = 0;
            for ch in 1..c {
                if d[(b * c + ch) * inner + k] > d[(b * c + best) * inner + k] {
                    best = ch;
                }
            }
            out.push(best);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionSource {
    Teacher,
    Color,
    Thermal,
    Interaction,
}

/// All four prediction sources for one batch.
pub struct BatchPrediction {
    pub logits: [Tensor; 3],
    pub teacher: Tensor,
}

pub fn predict_batch(
    suite: &mut ModelSuite,
    batch: &SceneBatch,
    mode: BnMode,
    fusion: &FusionConfig,
) -> Result<BatchPrediction> {
    let logits = suite.infer(&batch.color, &batch.thermal, mode)?;
    let tape = Tape::new();
    let vars = [0, 1, 2].map(|i| tape.constant(logits[i].clone()));
    let teacher = fuse(vars, fusion)?.teacher.tensor();
    Ok(BatchPrediction { logits, teacher })
}

/// Label map `H×W` for one scene.
pub fn predict(
    suite: &mut ModelSuite,
    pair: &ScenePair,
    source: PredictionSource,
    mode: BnMode,
    fusion: &FusionConfig,
) -> Result<Tensor> {
    let batch = SceneBatch::from_pairs(std::slice::from_ref(pair))?;
    let p = predict_batch(suite, &batch, mode, fusion)?;
    let logits = match source {
        PredictionSource::Teacher => &p.teacher,
        PredictionSource::Color => &p.logits[Modality::Color as usize],
        PredictionSource::Thermal => &p.logits[Modality::Thermal as usize],
        PredictionSource::Interaction => &p.logits[Modality::Interaction as usize],
    };
    let labels = argmax_labels(logits);
    Tensor::new(
        [pair.height(), pair.width()],
        labels.into_iter().map(|l| l as f64).collect(),
    )
}

/// Confusion matrices of the teacher and each branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub teacher: ConfusionMatrix,
    pub branches: [ConfusionMatrix; 3],
}

pub fn evaluate(
    suite: &mut ModelSuite,
    batches: &[SceneBatch],
    mode: BnMode,
    fusion: &FusionConfig,
) -> Result<Evaluation> {
    let classes = suite.config.classes;
    let mut ev = Evaluation {
        teacher: ConfusionMatrix::new(classes),
        branches: [0, 1, 2].map(|_| ConfusionMatrix::new(classes)),
    };
    for b in batches {
        let p = predict_batch(suite, b, mode, fusion)?;
        ev.teacher
            .accumulate(&argmax_labels(&p.teacher), &b.labels)?;
        for i in 0..3 {
            ev.branches[i].accumulate(&argmax_labels(&p.logits[i]), &b.labels)?;
        }
    }
    Ok(ev)
}
