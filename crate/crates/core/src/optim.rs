//! SGD with momentum and coupled weight decay.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub hyper: SgdHyper,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ParamStore<T>, hyper: SgdHyper) -> Result<Self> {
        if !(hyper.lr > 0.0) || !(0.0..1.0).contains(&hyper.momentum) || !(hyper.weight_decay >= 0.0)
        {
            return Err(Error::InvalidArgument("sgd hyperparameters out of range".into()));
        }
        Ok(Self {
            velocity: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            hyper,
        })
    }
}

/// One update: `v ← μ·v + g + λ·w`, then `w ← w − lr·v`.
pub fn sgd_momentum_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimState<T>,
) -> Result<()> {
    let (lr, mu, wd) = (
        T::from_f64(state.hyper.lr),
        T::from_f64(state.hyper.momentum),
        T::from_f64(state.hyper.weight_decay),
    );
    if params.len() != grads.as_slice().len() || params.len() != state.velocity.len() {
        return Err(Error::InvalidArgument("parameter, gradient and velocity counts differ".into()));
    }
    for ((w, g), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads.as_slice())
        .zip(&mut state.velocity)
    {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_momentum_step",
                expected: w.shape().to_vec(),
                actual: g.shape().to_vec(),
            });
        }
        for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi + wd * *wi;
            *wi = *wi - lr * *vi;
        }
    }
    Ok(())
}
