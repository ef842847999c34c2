//! Fast invariant suite run by `ttalab selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::{eef_fuse, eef_weights, fuse, pixel_entropy, FusionConfig};
use crate::gradcheck::{grad_check, grad_check_many, DEFAULT_STEP};
use crate::metrics::ConfusionMatrix;
use crate::models::{Cmsa, ModelConfig};
use crate::nn::{BnMode, Ctx, Trainable};
use crate::tape::{concat, NormStats, Tape, Var};
use crate::tensor::Tensor;
use crate::tta::{
    branch_distance, dynamic_weights, kl_to_teacher, tta_objective, AdaptConfig, LossMask,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &str, measured: f64, tolerance: f64) -> Self {
        Check {
            name: name.to_string(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelftestSummary {
    pub checks: Vec<Check>,
}

impl SelftestSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out += &format!(
                "{} {:<40} measured {:.3e} (tolerance {:.1e})\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance
            );
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        out += &format!("{} checks, {failed} failed\n", self.checks.len());
        out
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Entropy function under test; the mutation check swaps in a wrong one.
pub type EntropyFn = for<'t> fn(Var<'t>) -> Result<Var<'t>>;

fn scalar_entropy(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    logits
        .iter()
        .map(|v| {
            let p = (v - m).exp() / z;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// Fraction of pixels where the branch with the lowest true entropy does not
/// receive the largest weight.
pub fn fusion_monotonicity_violations(entropy: EntropyFn, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, pixels) = (4, 200);
    let ys: Vec<Tensor> = (0..3)
        .map(|_| Tensor::from_fn([1, c, 1, pixels], |_| rng.gen_range(-3.0..3.0)))
        .collect();
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = ys.iter().map(|y| tape.constant(y.clone())).collect();
    let ents = [entropy(vars[0])?, entropy(vars[1])?, entropy(vars[2])?];
    let w = eef_weights(ents, 2.0)?.map(|v| v.tensor());
    let mut bad = 0;
    for k in 0..pixels {
        let h: Vec<f64> = ys
            .iter()
            .map(|y| {
                let l: Vec<f64> = (0..c).map(|ch| y.data()[ch * pixels + k]).collect();
                scalar_entropy(&l)
            })
            .collect();
        let lowest = (0..3).min_by(|&a, &b| h[a].total_cmp(&h[b])).unwrap_or(0);
        let heaviest = (0..3)
            .max_by(|&a, &b| w[a].data()[k].total_cmp(&w[b].data()[k]))
            .unwrap_or(0);
        if lowest != heaviest {
            bad += 1;
        }
    }
    Ok(bad as f64 / pixels as f64)
}

fn flipped_entropy(v: Var<'_>) -> Result<Var<'_>> {
    Ok(pixel_entropy(v)?.neg())
}

/// Seeded inputs per gradient check.
pub const SEEDS: usize = 5;
pub const GRAD_TOL: f64 = 1e-5;

fn grad_checks(checks: &mut Vec<Check>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = |name: &str, errs: Vec<f64>| {
        let m = errs.into_iter().fold(0.0, f64::max);
        checks.push(Check::at_most(name, m, GRAD_TOL));
    };

    let mut e = Vec::new();
    for _ in 0..SEEDS {
        let a = rand_tensor(&[2, 3], &mut rng);
        let b = rand_tensor(&[2, 3], &mut rng);
        // keep the divisor and log argument away from zero
        let c = rand_tensor(&[2, 3], &mut rng).map(|v| 1.5 + v);
        e.push(grad_check_many(
            |_, v| {
                let x = v[0].add(v[1])?.mul(v[0].sub(v[1])?)?;
                let y = x.div(v[2])?.add(v[2].log()?)?.neg().exp();
                let z = v[0]
                    .relu()
                    .add(v[1].sigmoid())?
                    .mul_scalar(0.7)
                    .add_scalar(0.1);
                Ok(y.add(z)?.sum_all())
            },
            &[a, b, c],
            DEFAULT_STEP,
        )?);
    }
    worst("grad elementwise", e);

    let mut e = Vec::new();
    for _ in 0..SEEDS {
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let m = rand_tensor(&[4, 5], &mut rng);
        e.push(grad_check_many(
            |_, v| {
                let r = v[0].sum(&[1], true)?.add(v[0].mean(&[2], true)?)?;
                let r = r.add(v[0].max(&[1], true)?)?.reshape(&[6, 4])?;
                let p = r.matmul(v[1])?.transpose()?.softmax(0)?;
                Ok(p.mul(p)?.mean_all())
            },
            &[a, m],
            DEFAULT_STEP,
        )?);
    }
    worst("grad reductions/matmul/softmax", e);

    let mut e = Vec::new();
    for _ in 0..SEEDS {
        let x = rand_tensor(&[2, 4, 3, 3], &mut rng);
        let labels: Vec<usize> = (0..18).map(|_| rng.gen_range(0..4)).collect();
        e.push(grad_check(
            move |_, v| crate::nn::cross_entropy(v, &labels),
            &x,
            DEFAULT_STEP,
        )?);
    }
    worst("grad cross_entropy", e);

    let mut e = Vec::new();
    for _ in 0..SEEDS {
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let w = rand_tensor(&[2, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        e.push(grad_check_many(
            |_, v| Ok(v[0].conv2d(v[1], Some(v[2]), 1, 1)?.sigmoid().sum_all()),
            &[x, w, b],
            DEFAULT_STEP,
        )?);
    }
    worst("grad conv2d", e);

    let mut e = Vec::new();
    for _ in 0..SEEDS {
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let g = rand_tensor(&[3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let r = rand_tensor(&[2, 3, 4, 4], &mut rng);
        e.push(grad_check_many(
            move |t, v| {
                let (y, _) = v[0].batch_norm(v[1], v[2], NormStats::Batch, 1e-5)?;
                Ok(y.mul(t.constant(r.clone()))?.sum_all())
            },
            &[x, g, b],
            DEFAULT_STEP,
        )?);
    }
    worst("grad batch_norm", e);

    let mut e = Vec::new();
    for _ in 0..SEEDS {
        let x = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let r = rand_tensor(&[1, 2, 4, 4], &mut rng);
        e.push(grad_check(
            move |t, v| {
                let up = v.maxpool2()?.upsample2()?;
                let both = concat(&[up, v], 1)?;
                Ok(both
                    .log_softmax(1)?
                    .mul(t.constant(concat_const(&r)))?
                    .sum_all())
            },
            &x,
            DEFAULT_STEP,
        )?);
    }
    worst("grad pool/upsample/concat/log_softmax", e);

    let cfg = ModelConfig::default();
    let channels = cfg.bottleneck_channels();
    let mut e = Vec::new();
    for s in 0..SEEDS as u64 {
        let mut mrng = ChaCha8Rng::seed_from_u64(100 + s);
        let cmsa = Cmsa::new("cmsa", channels, &mut mrng);
        let fc = rand_tensor(&[2, channels, 2, 2], &mut rng);
        let ft = rand_tensor(&[2, channels, 2, 2], &mut rng);
        e.push(grad_check_many(
            move |t, v| {
                let mut ctx = Ctx::new(t, BnMode::Eval, Trainable::Nothing);
                let out = cmsa.forward(&mut ctx, v[0], v[1])?;
                Ok(out.color.mul(out.thermal)?.sum_all())
            },
            &[fc, ft],
            DEFAULT_STEP,
        )?);
    }
    worst("grad cmsa", e);

    let mut e = Vec::new();
    for _ in 0..SEEDS {
        let ys: Vec<Tensor> = (0..3)
            .map(|_| rand_tensor(&[1, 3, 2, 2], &mut rng))
            .collect();
        let teacher = rand_tensor(&[1, 3, 2, 2], &mut rng);
        // the distillation target is detached, so it enters as a constant
        e.push(grad_check_many(
            move |t, v| {
                let f = fuse([v[0], v[1], v[2]], &FusionConfig::default())?;
                let h = pixel_entropy(f.teacher)?.sum_all();
                Ok(h.add(kl_to_teacher(v[0], t.constant(teacher.clone()))?)?)
            },
            &ys,
            DEFAULT_STEP,
        )?);
    }
    worst("grad fusion + objective terms", e);

    let mut e = Vec::new();
    for _ in 0..SEEDS {
        let ys: Vec<Tensor> = (0..3)
            .map(|_| rand_tensor(&[2, 4, 2, 2], &mut rng))
            .collect();
        let omega = [rng.gen_range(1.0..3.0), 1.0, rng.gen_range(1.0..3.0)];
        let target = eef_fuse(&ys[0], &ys[1], &ys[2], &FusionConfig::default())?.teacher_logits;
        e.push(grad_check_many(
            move |t, v| objective_fixed_target(t, [v[0], v[1], v[2]], &target, omega),
            &ys,
            DEFAULT_STEP,
        )?);
    }
    worst("grad adaptation objective", e);
    Ok(())
}

/// The adaptation objective with the distillation target held at `target`:
/// at `target` = teacher of the inputs, this has the gradient the engine follows.
pub fn objective_fixed_target<'t>(
    tape: &'t Tape,
    logits: [Var<'t>; 3],
    target: &Tensor,
    omega: [f64; 3],
) -> Result<Var<'t>> {
    let cfg = AdaptConfig::default();
    let fusion = fuse(logits, &cfg.fusion_config())?;
    let sharpen = AdaptConfig {
        loss_mask: LossMask {
            kl: false,
            ..LossMask::default()
        },
        ..cfg.clone()
    };
    let mut total = tta_objective(logits, &fusion, &sharpen, omega)?.total;
    let target = tape.constant(target.clone());
    for i in 0..3 {
        total = total.add(kl_to_teacher(logits[i], target)?.mul_scalar(cfg.lambda2 * omega[i]))?;
    }
    Ok(total)
}

fn concat_const(r: &Tensor) -> Tensor {
    let s = r.shape();
    let mut data = r.data().to_vec();
    data.extend_from_slice(r.data());
    // with N = 1, stacking along channels is a plain append
    Tensor::new([s[0], 2 * s[1], s[2], s[3]], data).expect("sizes agree")
}

fn fusion_checks(checks: &mut Vec<Check>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ys: Vec<Tensor> = (0..3)
        .map(|_| rand_tensor(&[2, 5, 6, 6], &mut rng))
        .collect();
    let out = eef_fuse(&ys[0], &ys[1], &ys[2], &FusionConfig::default())?;
    let plane = 2 * 36;
    let norm = (0..plane)
        .map(|k| {
            (out.weights.data()[k]
                + out.weights.data()[plane + k]
                + out.weights.data()[2 * plane + k]
                - 1.0)
                .abs()
        })
        .fold(0.0, f64::max);
    checks.push(Check::at_most("fusion weights sum to one", norm, 1e-9));

    let shifted: Vec<Tensor> = ys.iter().map(|y| y.map(|v| v + 3.0)).collect();
    let out2 = eef_fuse(
        &shifted[0],
        &shifted[1],
        &shifted[2],
        &FusionConfig::default(),
    )?;
    checks.push(Check::at_most(
        "fusion weights shift invariant",
        out.weights.max_abs_diff(&out2.weights),
        1e-9,
    ));

    let hot = FusionConfig {
        temp: 1e6,
        ..FusionConfig::default()
    };
    let uni = eef_fuse(&ys[0], &ys[1], &ys[2], &hot)?;
    let dev = uni
        .weights
        .data()
        .iter()
        .map(|w| (w - 1.0 / 3.0).abs())
        .fold(0.0, f64::max);
    checks.push(Check::at_most(
        "fusion uniform at high temperature",
        dev,
        1e-6,
    ));

    checks.push(Check::at_most(
        "fusion monotonicity violations",
        fusion_monotonicity_violations(pixel_entropy, 3)?,
        0.0,
    ));
    let mutated = fusion_monotonicity_violations(flipped_entropy, 3)?;
    checks.push(Check {
        name: "mutation: flipped entropy is detected".into(),
        measured: mutated,
        tolerance: 0.0,
        passed: mutated > 0.0,
    });
    Ok(())
}

fn weighting_checks(checks: &mut Vec<Check>) -> Result<()> {
    let p = Tensor::new([1, 2, 1, 1], vec![0.0, 0.0])?;
    let q = Tensor::new([1, 2, 1, 1], vec![0.0, 3f64.ln()])?;
    let d = branch_distance(&p, &q)?;
    checks.push(Check::at_most(
        "symmetric KL spot value",
        (d - 0.137327).abs(),
        1e-6,
    ));
    checks.push(Check::at_most(
        "symmetric KL symmetry",
        (d - branch_distance(&q, &p)?).abs(),
        1e-12,
    ));
    let w = dynamic_weights([0.02, 0.01, 0.04])?;
    let err = [2.0, 1.0, 4.0]
        .iter()
        .zip(w)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    checks.push(Check::at_most("dynamic weights spot value", err, 1e-12));
    Ok(())
}

fn metrics_checks(checks: &mut Vec<Check>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0.0;
    for _ in 0..20 {
        let pred: Vec<usize> = (0..64).map(|_| rng.gen_range(0..4)).collect();
        let gt: Vec<usize> = (0..64).map(|_| rng.gen_range(0..4)).collect();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &gt)?;
        for g in 0..4 {
            for p in 0..4 {
                let n = pred
                    .iter()
                    .zip(&gt)
                    .filter(|(a, b)| **a == p && **b == g)
                    .count() as u64;
                if n != cm.get(g, p) {
                    mismatches += 1.0;
                }
            }
        }
    }
    checks.push(Check::at_most(
        "confusion matrix vs brute force",
        mismatches,
        0.0,
    ));
    Ok(())
}

pub fn run() -> Result<SelftestSummary> {
    let mut checks = Vec::new();
    grad_checks(&mut checks)?;
    fusion_checks(&mut checks)?;
    weighting_checks(&mut checks)?;
    metrics_checks(&mut checks)?;
    Ok(SelftestSummary { checks })
}
