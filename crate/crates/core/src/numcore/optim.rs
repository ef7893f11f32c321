use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Plain gradient step `p ← p − lr·g`. Nothing is modified when any
/// gradient entry is non-finite.
pub fn sgd_step<T: Real>(params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: T) -> Result<()> {
    if !(lr > T::zero()) || !lr.is_finite() {
        return Err(Error::Contract(format!("learning rate must be positive, got {lr:?}")));
    }
    check_grads(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv = *pv - lr * gv;
        }
    }
    Ok(())
}

fn check_grads<T: Real>(params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("sgd", format!("{} params vs {} grads", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd", format!("param {i}: {:?} vs {:?}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum. With `momentum = 0` every step is
/// exactly [`sgd_step`].
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if self.momentum == T::zero() {
            return sgd_step(params, grads, self.lr);
        }
        check_grads(params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv = *pv - self.lr * *vv;
            }
        }
        Ok(())
    }
}
