//! Central-difference gradient checking against the tape.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Max over every coordinate of every input of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    let shape = loss.shape();
    if loss.value().numel() != 1 {
        return Err(Error::NotScalar(shape));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&t, &vs)?;
        let v = y.value().item()?;
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for k in 0..inputs[which].numel() {
            let orig = inputs[which].data()[k];
            probe[which].data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe[which].data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe[which].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), h)
}
