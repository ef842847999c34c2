mod common;

use common::{assert_close, central_diff, rand_tensor};
use ttalab::gradcheck::{grad_check, grad_check_many, DEFAULT_STEP};
use ttalab::tape::{concat, NormStats};
use ttalab::{Error, Tape, Tensor};

#[test]
fn elementwise_product_and_additive_identity() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
    let b = tape.constant(Tensor::vector(&[4.0, 5.0, 6.0]));
    assert_eq!(a.mul(b).unwrap().tensor().data(), &[4.0, 10.0, 18.0]);

    let x = rand_tensor(&[3, 4], 11);
    let xv = tape.constant(x.clone());
    let zero = tape.constant(Tensor::scalar(0.0));
    assert!(xv.add(zero).unwrap().tensor().bit_eq(&x));
}

#[test]
fn mul_gradient_matches_central_differences() {
    let b = [3.0, 4.0];
    let oracle = central_diff(|a| a[0] * b[0] + a[1] * b[1], &[1.0, 2.0], 1e-6);
    assert_close(&oracle, &[3.0, 4.0], 1e-8);

    let tape = Tape::new();
    let a = tape.leaf(Tensor::vector(&[1.0, 2.0]));
    let bv = tape.constant(Tensor::vector(&b));
    let loss = a.mul(bv).unwrap().sum_all();
    let g = tape.backward(loss).unwrap();
    assert_close(g.get(a).unwrap().data(), &oracle, 1e-8);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2]));
    let err = a.add(b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
}

#[test]
fn log_of_non_positive_is_a_domain_error() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::vector(&[1.0, 0.0]));
    assert!(matches!(a.log(), Err(Error::Domain { op: "log", .. })));
}

#[test]
fn reductions() {
    let tape = Tape::new();
    let v = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
    assert_eq!(v.sum(&[0], false).unwrap().tensor().item().unwrap(), 6.0);
    let ones = tape.constant(Tensor::ones([2, 2]));
    assert_eq!(ones.mean_all().tensor().item().unwrap(), 1.0);
    let kept = ones.sum(&[1], true).unwrap();
    assert_eq!(kept.shape(), vec![2, 1]);
    assert!(matches!(
        ones.sum(&[3], false),
        Err(Error::InvalidAxis { axis: 3, rank: 2 })
    ));
}

#[test]
fn max_gradient_routes_to_argmax() {
    let x = [-1.0, 5.0, 3.0];
    let oracle = central_diff(
        |v| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        &x,
        1e-6,
    );
    assert_close(&oracle, &[0.0, 1.0, 0.0], 1e-8);

    let tape = Tape::new();
    let v = tape.leaf(Tensor::vector(&x));
    let m = v.max(&[0], false).unwrap();
    assert_eq!(m.tensor().item().unwrap(), 5.0);
    let g = tape.backward(m).unwrap();
    assert_close(g.get(v).unwrap().data(), &oracle, 1e-8);
}

#[test]
fn max_ties_route_to_first_index() {
    let tape = Tape::new();
    let v = tape.leaf(Tensor::vector(&[2.0, 7.0, 7.0]));
    let g = tape.backward(v.max(&[0], false).unwrap()).unwrap();
    assert_eq!(g.get(v).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let x = rand_tensor(&[3, 4], 2);
    let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let out = tape
        .constant(eye)
        .matmul(tape.constant(x.clone()))
        .unwrap()
        .tensor();
    assert!(out.bit_eq(&x));

    let a = tape.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::new([2, 1], vec![1.0, 1.0]).unwrap());
    let p = a.matmul(b).unwrap().tensor();
    assert_eq!(p.shape(), &[2, 1]);
    assert_eq!(p.data(), &[3.0, 7.0]);

    let bad = tape.constant(Tensor::zeros([3, 1]));
    assert!(matches!(
        a.matmul(bad),
        Err(Error::ShapeMismatch { op: "matmul", .. })
    ));
}

#[test]
fn matmul_gradient_against_central_differences() {
    let a = rand_tensor(&[3, 2], 7);
    let b = rand_tensor(&[2, 4], 8);
    let bd = b.data().to_vec();
    let oracle = central_diff(
        |av| {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..4 {
                    for p in 0..2 {
                        s += av[i * 2 + p] * bd[p * 4 + j];
                    }
                }
            }
            s
        },
        a.data(),
        1e-6,
    );
    let tape = Tape::new();
    let av = tape.leaf(a);
    let loss = av.matmul(tape.constant(b)).unwrap().sum_all();
    let g = tape.backward(loss).unwrap();
    for (x, y) in g.get(av).unwrap().data().iter().zip(&oracle) {
        assert!((x - y).abs() / 1f64.max(x.abs()) <= 1e-6);
    }
}

#[test]
fn backward_basics_and_errors() {
    let tape = Tape::new();
    let x = tape.leaf(rand_tensor(&[2, 3], 1));
    let g = tape.backward(x.sum_all()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    assert!(matches!(
        tape.backward(x.sum_all()),
        Err(Error::TapeConsumed)
    ));

    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(&[1.0, -2.0]));
    let g = tape.backward(x.mul(x).unwrap().sum_all()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0]);

    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(&[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn reset_allows_reuse() {
    let mut tape = Tape::new();
    {
        let x = tape.leaf(Tensor::vector(&[1.0]));
        tape.backward(x.sum_all()).unwrap();
    }
    tape.reset();
    assert!(tape.is_empty());
    let x = tape.leaf(Tensor::vector(&[3.0]));
    assert!(tape.backward(x.sum_all()).is_ok());
}

#[test]
fn grad_check_examples() {
    let x = rand_tensor(&[3, 3], 4);
    let e = grad_check(|_, v| Ok(v.sum_all()), &x, DEFAULT_STEP).unwrap();
    assert!(e <= 1e-10, "{e}");
    let e = grad_check(
        |_, v| Ok(v.exp().sum_all()),
        &Tensor::vector(&[0.0, 1.0]),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(e <= 1e-6, "{e}");
    let nonscalar = grad_check(
        |_, v| Ok(v.exp()),
        &Tensor::vector(&[0.0, 1.0]),
        DEFAULT_STEP,
    );
    assert!(matches!(nonscalar, Err(Error::NotScalar(_))));
}

#[test]
fn every_primitive_passes_grad_check_on_ten_seeds() {
    for seed in 0..10u64 {
        let a = rand_tensor(&[2, 3, 2, 2], seed);
        let b = rand_tensor(&[3, 1, 1], seed + 100);
        let pos = a.map(|v| v.abs() + 0.5);
        let w = rand_tensor(&[2, 3, 2, 2], seed + 200);
        let checks: Vec<(&str, f64)> = vec![
            (
                "add",
                grad_check_many(
                    |t, v| Ok(v[0].add(v[1])?.mul(t.constant(w.clone()))?.sum_all()),
                    &[a.clone(), b.clone()],
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "sub",
                grad_check_many(
                    |t, v| Ok(v[0].sub(v[1])?.mul(t.constant(w.clone()))?.sum_all()),
                    &[a.clone(), b.clone()],
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "mul",
                grad_check_many(
                    |_, v| Ok(v[0].mul(v[1])?.sum_all()),
                    &[a.clone(), b.clone()],
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "div",
                grad_check_many(
                    |_, v| Ok(v[1].div(v[0])?.sum_all()),
                    &[pos.clone(), b.clone()],
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "exp",
                grad_check(
                    |t, v| Ok(v.exp().mul(t.constant(w.clone()))?.sum_all()),
                    &a,
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "log",
                grad_check(
                    |t, v| Ok(v.log()?.mul(t.constant(w.clone()))?.sum_all()),
                    &pos,
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "neg",
                grad_check(
                    |t, v| Ok(v.neg().mul(t.constant(w.clone()))?.sum_all()),
                    &a,
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "relu",
                grad_check(
                    |t, v| Ok(v.relu().mul(t.constant(w.clone()))?.sum_all()),
                    &a,
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "sigmoid",
                grad_check(
                    |t, v| Ok(v.sigmoid().mul(t.constant(w.clone()))?.sum_all()),
                    &a,
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "mean",
                grad_check(
                    |t, v| {
                        Ok(v.mean(&[1, 3], true)?
                            .mul(v.mean(&[1, 3], true)?)?
                            .sum_all()
                            .mul(t.constant(Tensor::scalar(1.0)))?)
                    },
                    &a,
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "max",
                grad_check(|_, v| Ok(v.max(&[2, 3], false)?.exp().sum_all()), &a, 1e-6).unwrap(),
            ),
            (
                "matmul",
                grad_check_many(
                    |_, v| Ok(v[0].matmul(v[1])?.exp().sum_all()),
                    &[rand_tensor(&[3, 2], seed), rand_tensor(&[2, 4], seed + 1)],
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "transpose",
                grad_check(
                    |t, v| {
                        Ok(v.transpose()?
                            .mul(t.constant(rand_tensor(&[2, 3], 9)))?
                            .sum_all())
                    },
                    &rand_tensor(&[3, 2], seed),
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "log_softmax",
                grad_check(
                    |t, v| Ok(v.log_softmax(1)?.mul(t.constant(w.clone()))?.sum_all()),
                    &a,
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "maxpool2",
                grad_check(
                    |t, v| {
                        Ok(v.maxpool2()?
                            .mul(t.constant(rand_tensor(&[2, 3, 1, 1], 5)))?
                            .sum_all())
                    },
                    &a,
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "upsample2",
                grad_check(
                    |t, v| {
                        Ok(v.upsample2()?
                            .mul(t.constant(rand_tensor(&[2, 3, 4, 4], 5)))?
                            .sum_all())
                    },
                    &a,
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "concat",
                grad_check_many(
                    |t, v| {
                        Ok(concat(&[v[0], v[1]], 1)?
                            .mul(t.constant(rand_tensor(&[2, 6, 2, 2], 3)))?
                            .sum_all())
                    },
                    &[a.clone(), w.clone()],
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "conv2d",
                grad_check_many(
                    |t, v| {
                        Ok(v[0]
                            .conv2d(v[1], Some(v[2]), 1, 1)?
                            .mul(t.constant(rand_tensor(&[2, 2, 2, 2], 6)))?
                            .sum_all())
                    },
                    &[
                        a.clone(),
                        rand_tensor(&[2, 3, 3, 3], seed + 3),
                        rand_tensor(&[2], seed + 4),
                    ],
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "batch_norm",
                grad_check_many(
                    |t, v| {
                        Ok(v[0]
                            .batch_norm(v[1], v[2], NormStats::Batch, 1e-5)?
                            .0
                            .mul(t.constant(w.clone()))?
                            .sum_all())
                    },
                    &[
                        a.clone(),
                        rand_tensor(&[3], seed + 5),
                        rand_tensor(&[3], seed + 6),
                    ],
                    1e-6,
                )
                .unwrap(),
            ),
            (
                "nll",
                grad_check(
                    |_, v| v.log_softmax(1)?.nll(&[0, 1, 2, 255, 1, 1, 0, 2], 255),
                    &a,
                    1e-6,
                )
                .unwrap(),
            ),
        ];
        for (name, err) in checks {
            assert!(err <= 1e-5, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn reductions_are_bitwise_deterministic() {
    let x = rand_tensor(&[5, 7, 3], 21);
    let run = || {
        let tape = Tape::new();
        tape.constant(x.clone())
            .sum(&[0, 2], false)
            .unwrap()
            .tensor()
    };
    assert!(run().bit_eq(&run()));
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x0 = rand_tensor(&[4], 3);
    fn f1(v: ttalab::Var<'_>) -> ttalab::Var<'_> {
        v.exp().sum_all()
    }
    fn f2(v: ttalab::Var<'_>) -> ttalab::Var<'_> {
        v.mul(v).unwrap().sum_all()
    }
    let grad_of = |combine: u8| {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = match combine {
            0 => f1(x),
            1 => f2(x),
            _ => f1(x).add(f2(x)).unwrap(),
        };
        tape.backward(loss).unwrap().get(x).unwrap().clone()
    };
    let (g1, g2, g12) = (grad_of(0), grad_of(1), grad_of(2));
    let summed: Vec<f64> = g1
        .data()
        .iter()
        .zip(g2.data())
        .map(|(a, b)| a + b)
        .collect();
    assert_close(g12.data(), &summed, 1e-12);
}

#[test]
fn detached_values_carry_no_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(&[1.0, 2.0]));
    let y = x.detach().mul(x).unwrap().sum_all();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
}
