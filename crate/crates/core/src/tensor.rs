//! Dense row-major `f64` tensors and the shape arithmetic shared by the tape.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        let strides = strides(&self.shape);
        let off: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and every stored value.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Numpy-style broadcast: shapes are right-aligned and size-1 dims expand.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast dims).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Walk every index of `shape` in row-major order, tracking one offset per stride set.
pub(crate) fn walk<const K: usize>(
    shape: &[usize],
    strides: [&[usize]; K],
    mut f: impl FnMut(usize, [usize; K]),
) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = [0usize; K];
    for linear in 0..n {
        f(linear, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            for k in 0..K {
                off[k] += strides[k][d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for k in 0..K {
                off[k] -= strides[k][d] * shape[d];
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    })?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![0.0; out.iter().product()];
    walk(&out, [&sa, &sb], |i, [ia, ib]| {
        data[i] = f(a.data[ia], b.data[ib])
    });
    Ok(Tensor { shape: out, data })
}

/// Sum a broadcast result back down to `shape` (the adjoint of broadcasting).
pub(crate) fn sum_to_shape(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let s = broadcast_strides(shape, &t.shape);
    let mut data = vec![0.0; shape.iter().product()];
    walk(&t.shape, [&s], |i, [o]| data[o] += t.data[i]);
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Expand `t` to `shape` by replication along broadcast dims.
pub(crate) fn expand_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let s = broadcast_strides(&t.shape, shape);
    let mut data = vec![0.0; shape.iter().product()];
    walk(shape, [&s], |i, [o]| data[i] = t.data[o]);
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

pub(crate) struct Reduced {
    pub value: Tensor,
    /// Shape with reduced axes kept as size 1.
    pub kept_shape: Vec<usize>,
    /// For `Max`: flat input index of the first maximum of each output cell.
    pub argmax: Vec<usize>,
    pub count: usize,
}

pub(crate) fn normalize_axes(axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(Error::InvalidAxis { axis: w[0], rank });
        }
    }
    if let Some(&a) = sorted.iter().find(|&&a| a >= rank) {
        return Err(Error::InvalidAxis { axis: a, rank });
    }
    Ok(sorted)
}

pub(crate) fn reduce(
    t: &Tensor,
    axes: &[usize],
    keepdim: bool,
    kind: ReduceKind,
) -> Result<Reduced> {
    let axes = normalize_axes(axes, t.rank())?;
    let kept_shape: Vec<usize> = t
        .shape
        .iter()
        .enumerate()
        .map(|(d, &n)| if axes.contains(&d) { 1 } else { n })
        .collect();
    let n_out: usize = kept_shape.iter().product();
    let count = if n_out == 0 { 0 } else { t.numel() / n_out };
    let s = broadcast_strides(&kept_shape, &t.shape);
    let mut argmax = Vec::new();
    let data = match kind {
        ReduceKind::Sum | ReduceKind::Mean => {
            let mut acc = vec![0.0; n_out];
            walk(&t.shape, [&s], |i, [o]| acc[o] += t.data[i]);
            if kind == ReduceKind::Mean {
                let c = count as f64;
                acc.iter_mut().for_each(|v| *v /= c);
            }
            acc
        }
        ReduceKind::Max => {
            let mut best = vec![f64::NEG_INFINITY; n_out];
            argmax = vec![usize::MAX; n_out];
            walk(&t.shape, [&s], |i, [o]| {
                // strict comparison keeps the first maximum on ties
                if argmax[o] == usize::MAX || t.data[i] > best[o] {
                    best[o] = t.data[i];
                    argmax[o] = i;
                }
            });
            best
        }
    };
    let out_shape = if keepdim {
        kept_shape.clone()
    } else {
        t.shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &n)| n)
            .collect()
    };
    Ok(Reduced {
        value: Tensor {
            shape: out_shape,
            data,
        },
        kept_shape,
        argmax,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
    }

    #[test]
    fn sum_to_shape_is_adjoint_of_expand() {
        let t = Tensor::from_fn([2, 1, 3], |i| i as f64);
        let e = expand_to(&t, &[2, 4, 3]);
        let back = sum_to_shape(&e, &[2, 1, 3]);
        assert_eq!(back.data(), t.map(|v| 4.0 * v).data());
    }

    #[test]
    fn reduce_max_keeps_first_tie() {
        let t = Tensor::vector(&[1.0, 5.0, 5.0]);
        let r = reduce(&t, &[0], false, ReduceKind::Max).unwrap();
        assert_eq!(r.value.item().unwrap(), 5.0);
        assert_eq!(r.argmax, vec![1]);
    }

    #[test]
    fn reduce_rejects_bad_axes() {
        let t = Tensor::zeros([2, 2]);
        assert!(matches!(
            reduce(&t, &[2], false, ReduceKind::Sum),
            Err(Error::InvalidAxis { axis: 2, .. })
        ));
        assert!(reduce(&t, &[0, 0], false, ReduceKind::Sum).is_err());
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..4, 0..=4)
    }

    proptest! {
        #[test]
        fn broadcast_is_associative(a in shape_strategy(), b in shape_strategy(), c in shape_strategy()) {
            let left = broadcast_shape(&a, &b).and_then(|ab| broadcast_shape(&ab, &c));
            let right = broadcast_shape(&b, &c).and_then(|bc| broadcast_shape(&a, &bc));
            prop_assert_eq!(left, right);
        }
    }
}
