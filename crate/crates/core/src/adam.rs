//! Bias-corrected Adam.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

/// Moment buffers and step counter for [`adam_step`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Real> AdamState<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Applies one Adam update to every parameter using its stored gradient
/// (a missing gradient counts as zero).
///
/// All gradients are validated before any parameter changes, so a
/// non-finite gradient leaves both parameters and state untouched.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    for (name, t) in params.iter() {
        if t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient { name: name.to_owned() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let cast = T::from_f64_lossy;
    for (name, tensor) in params.iter_mut() {
        let n = tensor.numel();
        let grad = tensor.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); n]);
        let m = state.first.entry(name.to_owned()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.second.entry(name.to_owned()).or_insert_with(|| vec![T::zero(); n]);
        if m.len() != n || v.len() != n {
            return Err(Error::invalid(
                "adam_step",
                format!("moment buffers for `{name}` do not match its {n} values"),
            ));
        }
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = cast(b1) * m[i] + cast(1.0 - b1) * g;
            v[i] = cast(b2) * v[i] + cast(1.0 - b2) * g * g;
            let m_hat = m[i].to_f64_lossy() / bc1;
            let v_hat = v[i].to_f64_lossy() / bc2;
            *p -= cast(lr * m_hat / (v_hat.sqrt() + state.eps));
        }
    }
    Ok(())
}
