//! Scalar and row-wise activations shared by the tape ops and plain
//! evaluation code.

use super::tensor::{Real, Tensor};
use crate::error::Result;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn relu<T: Real>(x: T) -> T {
    x.max(T::zero())
}

/// `log(1 + e^x)` without overflow for large `x`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax of a vector or matrix.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = x.as_matrix_dims()?;
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

/// Row-wise log-softmax of a vector or matrix.
pub fn log_softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = x.as_matrix_dims()?;
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    Ok(out)
}
