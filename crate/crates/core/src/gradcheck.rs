//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a − n| / max(|a|, |n|, 1e-8)` over all checked components.
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst component.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Components whose step was shrunk to keep both evaluations on the
    /// same side of every ReLU / max decision.
    pub shrunk: usize,
}

/// Which components of each input to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many components per input, chosen with the given seed.
    Sampled { per_input: usize, seed: u64 },
    /// The components with the largest analytic gradient magnitude in each
    /// input. Finite differences cannot resolve components many orders of
    /// magnitude below the output's rounding error, so deep-network checks
    /// use this; per-op checks should use [`Coverage::All`].
    Largest { per_input: usize },
}

pub const MAX_HALVINGS: u32 = 12;

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of a scalar function with central
/// differences `(f(x+eps) − f(x−eps)) / (2·eps)` on every component.
///
/// A difference that straddles a kink of a non-smooth op measures no
/// derivative at all, so when either perturbed evaluation takes a different
/// branch than the unperturbed one the step is halved (up to
/// [`MAX_HALVINGS`] times).
///
/// Run it in `f64`; `f32` is supported for coarse checks only.
pub fn grad_check<T: Real, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, eps, Coverage::All)
}

pub fn grad_check_with<T: Real, F>(f: F, inputs: &[Tensor<T>], eps: f64, coverage: Coverage) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eps_t = T::from_f64_lossy(eps);
    let eval = |values: &[Tensor<T>]| -> Result<(f64, Option<u64>)> {
        let mut g = Graph::tracking_branches();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((scalar_of(&g, out)?, g.branch_signature()))
    };

    let mut g = Graph::tracking_branches();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let base = g.branch_signature();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        shrunk: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[i].shape());
        let n = inputs[i].numel();
        let indices: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sampled { per_input, seed } if per_input < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut picked = sample(&mut rng, n, per_input).into_vec();
                picked.sort_unstable();
                picked
            }
            Coverage::Sampled { .. } => (0..n).collect(),
            Coverage::Largest { per_input } => {
                let mut order: Vec<usize> = (0..n).collect();
                let mag = |k: usize| analytic.data()[k].to_f64_lossy().abs();
                order.sort_by(|&p, &q| mag(q).total_cmp(&mag(p)).then(p.cmp(&q)));
                order.truncate(per_input);
                order.sort_unstable();
                order
            }
        };
        for j in indices {
            let orig = inputs[i].data()[j];
            let mut step = eps_t;
            let mut halvings = 0;
            let numeric = loop {
                let up = orig + step;
                let down = orig - step;
                work[i].data_mut()[j] = up;
                let (plus, sig_plus) = eval(&work)?;
                work[i].data_mut()[j] = down;
                let (minus, sig_minus) = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let smooth = sig_plus == base && sig_minus == base;
                if smooth || halvings == MAX_HALVINGS {
                    // Divide by the step actually taken after rounding.
                    break (plus - minus) / (up - down).to_f64_lossy();
                }
                halvings += 1;
                step /= T::one() + T::one();
            };
            if halvings > 0 {
                report.shrunk += 1;
            }
            let a = analytic.data()[j].to_f64_lossy();
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn scalar_of<T: Real>(g: &Graph<T>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("function must return a scalar, got shape {:?}", t.shape()),
        ));
    }
    Ok(t.item().to_f64_lossy())
}
