//! Supervised source pretraining of the three branches on day scenes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionConfig, FusionStrategy};
use crate::models::{BranchInputs, ModelSuite};
use crate::nn::{cross_entropy, BnMode, Ctx, Trainable};
use crate::synth::{SceneBatch, ScenePair};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tta::Optimizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epoch at which the learning rate is multiplied by `decay`.
    pub decay_epoch: usize,
    pub decay: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Shuffling seed.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            lr: 1e-2,
            decay_epoch: 20,
            decay: 0.1,
            batch_size: 8,
            momentum: 0.9,
            seed: 11,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "pretrain.epochs must be >= 1 and pretrain.batch_size >= 2".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "pretrain.lr must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "pretrain.momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over steps of the summed cross-entropies.
    pub loss: f64,
}

/// Cross-entropy of every branch plus that of the mean-fused teacher.
pub fn pretrain_step(
    suite: &mut ModelSuite,
    batch: &SceneBatch,
    opt: &mut Optimizer,
) -> Result<f64> {
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, BnMode::Train, Trainable::Everything);
    let inputs = BranchInputs {
        color: tape.constant(batch.color.clone()),
        thermal: tape.constant(batch.thermal.clone()),
    };
    let logits = suite.forward_all(&mut ctx, &inputs)?;
    let merge = FusionConfig {
        temp: 1.0,
        strategy: FusionStrategy::Merge,
    };
    let teacher = fuse(logits, &merge)?.teacher;
    let mut loss = cross_entropy(teacher, &batch.labels)?;
    for l in logits {
        loss = loss.add(cross_entropy(l, &batch.labels)?)?;
    }
    let value = loss.value().item()?;
    if !value.is_finite() {
        return Err(Error::Diverged(format!("pretraining loss became {value}")));
    }
    let grads = tape.backward(loss)?;
    let by_name: BTreeMap<String, Tensor> = ctx
        .bindings()
        .iter()
        .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.clone())))
        .collect();
    opt.step(suite.params_mut(), &by_name);
    Ok(value)
}

/// Train all three branches jointly; returns one record per epoch.
pub fn pretrain(
    suite: &mut ModelSuite,
    train: &[ScenePair],
    cfg: &PretrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::MissingInput("pretraining needs training scenes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::sgd(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = if epoch >= cfg.decay_epoch {
            cfg.lr * cfg.decay
        } else {
            cfg.lr
        };
        opt.set_lr(lr);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            // a trailing single scene would give degenerate batch statistics
            if chunk.len() < 2 {
                continue;
            }
            let pairs: Vec<ScenePair> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = SceneBatch::from_pairs(&pairs)?;
            sum += pretrain_step(suite, &batch, &mut opt)?;
            steps += 1;
        }
        records.push(EpochRecord {
            epoch,
            lr,
            loss: sum / steps.max(1) as f64,
        });
    }
    Ok(records)
}
