mod common;

use common::{assert_close, rand_tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttalab::gradcheck::{grad_check, grad_check_many, DEFAULT_STEP};
use ttalab::nn::{
    cross_entropy, pool_and_resize, BatchNorm2d, BnMode, Conv2d, Ctx, Region, Resize, Trainable,
    IGNORE_LABEL,
};
use ttalab::tape::NormStats;
use ttalab::{Error, Tape, Tensor};

fn conv(in_c: usize, out_c: usize, k: usize, pad: usize, weight: Tensor) -> Conv2d {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut c = Conv2d::new("c", Region::Encoder, in_c, out_c, k, 1, pad, &mut rng);
    c.weight.value = weight;
    c
}

#[test]
fn identity_kernel_is_identity() {
    let c = conv(1, 1, 1, 0, Tensor::ones([1, 1, 1, 1]));
    let x = rand_tensor(&[2, 1, 4, 5], 3);
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, BnMode::Eval, Trainable::Nothing);
    let y = c
        .forward(&mut ctx, tape.constant(x.clone()))
        .unwrap()
        .tensor();
    assert!(y.bit_eq(&x));
}

#[test]
fn ones_kernel_counts_overlaps() {
    let c = conv(1, 1, 3, 1, Tensor::ones([1, 1, 3, 3]));
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, BnMode::Eval, Trainable::Nothing);
    let y = c
        .forward(&mut ctx, tape.constant(Tensor::ones([1, 1, 3, 3])))
        .unwrap()
        .tensor();
    assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv_gradient_check() {
    for seed in 0..5 {
        let x = rand_tensor(&[2, 3, 5, 5], seed);
        let w = rand_tensor(&[4, 3, 3, 3], 100 + seed);
        let r = rand_tensor(&[2, 4, 5, 5], 200 + seed);
        let err = grad_check_many(
            |t, v| {
                Ok(v[0]
                    .conv2d(v[1], None, 1, 1)?
                    .mul(t.constant(r.clone()))?
                    .sum_all())
            },
            &[x, w],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-5, "seed {seed}: {err}");
    }
}

fn channel_moments(y: &Tensor, c: usize) -> (f64, f64) {
    let s = y.shape();
    let plane = s[2] * s[3];
    let vals: Vec<f64> = (0..s[0])
        .flat_map(|n| {
            let off = (n * s[1] + c) * plane;
            y.data()[off..off + plane].to_vec()
        })
        .collect();
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
    (m, v)
}

#[test]
fn batch_norm_adapt_mode_normalizes() {
    // wide enough that the eps bias var/(var+eps) stays under 1e-6
    let x = rand_tensor(&[4, 3, 5, 5], 8).map(|v| 30.0 * v + 1.5);
    let mut bn = BatchNorm2d::new("bn", Region::Encoder, 3);
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, BnMode::Adapt, Trainable::Nothing);
    let y = bn
        .forward(&mut ctx, tape.constant(x.clone()))
        .unwrap()
        .tensor();
    for c in 0..3 {
        let (m, v) = channel_moments(&y, c);
        assert!(m.abs() <= 1e-9, "{m}");
        assert!((v - 1.0).abs() <= 1e-6, "{v}");
    }

    bn.gamma.value = Tensor::full([3], 2.0);
    bn.beta.value = Tensor::full([3], 3.0);
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, BnMode::Adapt, Trainable::Nothing);
    let y = bn.forward(&mut ctx, tape.constant(x)).unwrap().tensor();
    for c in 0..3 {
        let (m, v) = channel_moments(&y, c);
        assert!((m - 3.0).abs() <= 1e-9);
        assert!((v.sqrt() - 2.0).abs() <= 1e-5);
    }
}

#[test]
fn gamma_gradient_is_sum_of_normalized_input() {
    let x = rand_tensor(&[2, 2, 3, 3], 4);
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.leaf(Tensor::ones([2]));
    let b = tape.leaf(Tensor::zeros([2]));
    let (y, _) = xv
        .batch_norm(g, b, NormStats::Batch, BatchNorm2d::EPS)
        .unwrap();
    let grads = tape.backward(y.sum_all()).unwrap();
    let y = y.tensor();
    let expect: Vec<f64> = (0..2)
        .map(|c| {
            let (m, _) = channel_moments(&y, c);
            m * 18.0
        })
        .collect();
    assert_close(grads.get(g).unwrap().data(), &expect, 1e-12);
    assert_close(grads.get(b).unwrap().data(), &[18.0, 18.0], 1e-12);

    for seed in 0..5 {
        let x = rand_tensor(&[2, 2, 3, 3], 40 + seed);
        let r = rand_tensor(&[2, 2, 3, 3], 50 + seed);
        let gamma = rand_tensor(&[2], 60 + seed);
        let err = grad_check(
            move |t, gv| {
                let (y, _) = t.constant(x.clone()).batch_norm(
                    gv,
                    t.constant(Tensor::zeros([2])),
                    NormStats::Batch,
                    BatchNorm2d::EPS,
                )?;
                Ok(y.mul(t.constant(r.clone()))?.sum_all())
            },
            &gamma,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-5);
    }
}

#[test]
fn activations() {
    let tape = Tape::new();
    let r = tape
        .constant(Tensor::vector(&[-1.0, 0.0, 2.0]))
        .relu()
        .tensor();
    assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    let s = tape
        .constant(Tensor::vector(&[0.0, 3f64.ln()]))
        .sigmoid()
        .tensor();
    assert_eq!(s.data()[0], 0.5);
    assert!((s.data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn pooling_and_upsampling() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = pool_and_resize(Resize::MaxPool2, x).unwrap().tensor();
    assert_eq!(p.data(), &[4.0]);
    let u = pool_and_resize(
        Resize::NearestUpsample2,
        tape.constant(Tensor::full([1, 1, 1, 1], 5.0)),
    )
    .unwrap()
    .tensor();
    assert_eq!(u.shape(), &[1, 1, 2, 2]);
    assert_eq!(u.data(), &[5.0; 4]);
}

#[test]
fn global_max_pool_routes_gradient_to_argmax() {
    let x = rand_tensor(&[1, 1, 4, 4], 12);
    let arg = (0..16)
        .max_by(|&a, &b| x.data()[a].total_cmp(&x.data()[b]))
        .unwrap();
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = pool_and_resize(Resize::GlobalMaxPool, v).unwrap();
    let g = tape.backward(y.sum_all()).unwrap().get_or_zeros(v);
    for k in 0..16 {
        assert_eq!(g.data()[k], if k == arg { 1.0 } else { 0.0 });
    }
    let err = grad_check(
        |_, v| pool_and_resize(Resize::GlobalMaxPool, v).map(|y| y.sum_all()),
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err <= 1e-6);
}

#[test]
fn log_softmax_values() {
    let tape = Tape::new();
    let ls = |v: &[f64]| {
        tape.constant(Tensor::vector(v))
            .log_softmax(0)
            .unwrap()
            .tensor()
    };
    assert_close(ls(&[0.0, 0.0, 0.0]).data(), &[-(3f64.ln()); 3], 1e-15);
    let big = ls(&[1000.0, 0.0, 0.0]);
    assert!(big.all_finite());
    assert!(big.data()[0].abs() < 1e-12);
    let p = ls(&[1.0, 2.0, 3.0]).map(f64::exp);
    assert_close(p.data(), &[0.090031, 0.244728, 0.665241], 5e-7);
}

#[test]
fn cross_entropy_values_and_empty_mean() {
    let tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros([1, 3, 1, 2]));
    let l = cross_entropy(uniform, &[0, 2])
        .unwrap()
        .tensor()
        .item()
        .unwrap();
    assert!((l - 3f64.ln()).abs() < 1e-12);

    let mut sure = Tensor::zeros([1, 3, 1, 1]);
    sure.data_mut()[1] = 1000.0;
    let l = cross_entropy(tape.constant(sure), &[1])
        .unwrap()
        .tensor()
        .item()
        .unwrap();
    assert!(l.abs() < 1e-12);

    let err = cross_entropy(uniform, &[IGNORE_LABEL, IGNORE_LABEL]).unwrap_err();
    assert!(matches!(err, Error::EmptyMean(_)), "{err}");
}
