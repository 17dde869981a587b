use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// Bias-corrected Adam moments for a list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor4<T>>,
    pub v: Vec<Tensor4<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor4<T>]) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Tensor4<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor4::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One Adam update of every parameter in place.
pub fn adam_step<T: Real>(
    params: &mut [Tensor4<T>],
    grads: &[Tensor4<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            dim: "parameter count",
            expected: params.len(),
            found: grads.len().min(state.m.len()),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        p.shape().expect_eq(&g.shape(), "adam_step")?;
        p.shape().expect_eq(&m.shape(), "adam_step")?;
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - state.beta1), T::lit(1.0 - state.beta2));
    let step = T::lit(lr / bc1);
    let inv_bc2 = T::lit(1.0 / bc2);
    let eps = T::lit(state.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *w = *w - step * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr0` at `iter = 0` to zero at `iter = period`.
pub fn cosine_lr(iter: u64, period: u64, lr0: f64) -> f64 {
    if period == 0 {
        return lr0;
    }
    let frac = iter.min(period) as f64 / period as f64;
    (lr0 * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0).max(0.0)
}
