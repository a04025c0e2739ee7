//! Gradient-check suite over every differentiable graph op and a reduced
//! whole model, run by the test suites and the `gradcheck` command.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::gradcheck::{grad_check, grad_check_with, Coverage, GradCheckReport};
use crate::model::{ModelConfig, TwoStreamModel, FAKE, REAL};
use crate::params::{Bound, ParamStore};
use crate::srm::SrmKernelBank;
use crate::{Real, Result, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1)` and random sign (away from ReLU kinks).
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced 0.05 apart in random order (no max ties).
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("length matches shape")
}

/// Fixed positive, strictly increasing weights in `[1, 2)` for projecting an
/// output to a scalar.
pub fn probe_weights<T: Real>(shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_fn(shape, |i| T::from_f64_lossy(1.0 + i as f64 / n as f64))
}

/// Values in `[0.1, 1)`: with positive probes, sums of products stay away
/// from zero so coarse 32-bit differences remain meaningful.
pub fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, 0.1, 1.0)
}

pub fn probe<T: Real>(g: &mut Graph<T>, y: Var) -> Result<Var> {
    let w = probe_weights(g.shape(y));
    g.weighted_sum(y, &w)
}

/// Irregular signed weights in `±[0.5, 1.5)`. Smooth probes are nearly
/// annihilated by the adjoint of a high-pass filter.
pub fn rough_probe<T: Real>(g: &mut Graph<T>, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(g.shape(y), |i| {
        let h = ((i as f64 + 1.0) * 12.9898).sin() * 43758.5453;
        let mag = 0.5 + h - h.floor();
        T::from_f64_lossy(if i % 2 == 0 { mag } else { -mag })
    });
    g.weighted_sum(y, &w)
}

/// Rows `[a, −b]` with `a, b ∈ [0.3, 1)`: both tangent components of the
/// unit circle stay large.
pub fn opposite_sign_pairs(rng: &mut ChaCha8Rng, rows: usize) -> Tensor<f64> {
    Tensor::from_fn(&[rows, 2], |i| {
        let m = rng.random_range(0.3..1.0);
        if i % 2 == 0 {
            m
        } else {
            -m
        }
    })
}

// ---------------------------------------------------------------------------
// Gradient-check cases: one per differentiable primitive
// ---------------------------------------------------------------------------

pub type OpFn<T> = fn(&mut Graph<T>, &[Var]) -> Result<Var>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    /// Better-conditioned inputs for the 32-bit check, when they differ.
    pub inputs_f32: Option<fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>,
    pub f64_fn: OpFn<f64>,
    pub f32_fn: OpFn<f32>,
}

impl GradCase {
    pub fn f32_inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f32>> {
        (self.inputs_f32.unwrap_or(self.inputs))(rng).iter().map(Tensor::cast).collect()
    }
}

macro_rules! case {
    ($name:expr, $inputs:expr, $f:ident) => {
        GradCase {
            name: $name,
            inputs: $inputs,
            inputs_f32: None,
            f64_fn: $f::<f64>,
            f32_fn: $f::<f32>,
        }
    };
    ($name:expr, $inputs:expr, $inputs_f32:expr, $f:ident) => {
        GradCase {
            name: $name,
            inputs: $inputs,
            inputs_f32: Some($inputs_f32),
            f64_fn: $f::<f64>,
            f32_fn: $f::<f32>,
        }
    };
}

fn op_conv<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::same(3))?;
    probe(g, y)
}

fn op_conv_strided<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let spec = ConvSpec {
        stride: 2,
        pad: 1,
        depthwise: false,
    };
    let y = g.conv2d(v[0], v[1], None, spec)?;
    probe(g, y)
}

fn op_conv_pointwise<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::default())?;
    probe(g, y)
}

fn op_depthwise<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.conv2d(v[0], v[1], None, ConvSpec::depthwise_same(3))?;
    probe(g, y)
}

fn op_high_pass<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let k = SrmKernelBank::default().kernels::<T>();
    let y = g.high_pass(v[0], &k)?;
    rough_probe(g, y)
}

fn op_matmul<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.matmul(v[0], v[1])?;
    probe(g, y)
}

fn op_transpose<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.transpose(v[0])?;
    probe(g, y)
}

fn op_softmax0<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.softmax(v[0], 0)?;
    probe(g, y)
}

fn op_softmax1<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.softmax(v[0], 1)?;
    probe(g, y)
}

fn op_sigmoid<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.sigmoid(v[0]);
    probe(g, y)
}

fn op_relu<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.relu(v[0]);
    probe(g, y)
}

fn op_add<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.add(v[0], v[1])?;
    probe(g, y)
}

fn op_mul<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.mul(v[0], v[1])?;
    probe(g, y)
}

fn op_scale<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.scale(v[0], T::from_f64_lossy(-1.7));
    probe(g, y)
}

fn op_concat<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.concat(&[v[0], v[1]], 1)?;
    probe(g, y)
}

fn op_flatten<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let f = g.flatten(v[0])?;
    let y = g.mul(f, f)?;
    probe(g, y)
}

fn op_select_stack<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let a = g.select(v[0], 1)?;
    let b = g.select(v[0], 0)?;
    let y = g.stack(&[a, b, a])?;
    probe(g, y)
}

fn op_maxpool<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.maxpool2d(v[0])?;
    probe(g, y)
}

fn op_downsample<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.downsample(v[0], 2, 2)?;
    probe(g, y)
}

fn op_gap<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.global_avgpool(v[0])?;
    probe(g, y)
}

fn op_channel_max<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.channel_max(v[0])?;
    probe(g, y)
}

fn op_channel_avg<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.channel_avg(v[0])?;
    probe(g, y)
}

fn op_sum<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let sq = g.mul(v[0], v[0])?;
    Ok(g.sum(sq))
}

fn op_l2norm<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let y = g.l2_normalize_rows(v[0])?;
    probe(g, y)
}

fn op_am_softmax<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    g.am_softmax_loss(v[0], &[0, 1, 1, 0], T::from_f64_lossy(4.0), T::from_f64_lossy(0.35))
}

pub fn grad_cases() -> Vec<GradCase> {
    vec![
        case!(
            "conv2d",
            |r| vec![uniform(r, &[2, 3, 5, 5], -1.0, 1.0), uniform(r, &[4, 3, 3, 3], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            |r| vec![positive(r, &[2, 3, 5, 5]), positive(r, &[4, 3, 3, 3]), positive(r, &[4])],
            op_conv
        ),
        case!(
            "conv2d_stride2",
            |r| vec![uniform(r, &[1, 2, 5, 5], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0)],
            |r| vec![positive(r, &[1, 2, 5, 5]), positive(r, &[3, 2, 3, 3])],
            op_conv_strided
        ),
        case!(
            "conv2d_1x1",
            |r| vec![uniform(r, &[2, 6, 3, 4], -1.0, 1.0), uniform(r, &[2, 6, 1, 1], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)],
            |r| vec![positive(r, &[2, 6, 3, 4]), positive(r, &[2, 6, 1, 1]), positive(r, &[2])],
            op_conv_pointwise
        ),
        case!(
            "conv2d_depthwise",
            |r| vec![uniform(r, &[2, 2, 4, 5], -1.0, 1.0), uniform(r, &[3, 1, 3, 3], -1.0, 1.0)],
            |r| vec![positive(r, &[2, 2, 4, 5]), positive(r, &[3, 1, 3, 3])],
            op_depthwise
        ),
        case!("srm_high_pass", |r| vec![uniform(r, &[1, 2, 6, 7], -1.0, 1.0)], op_high_pass),
        case!(
            "matmul",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0)],
            |r| vec![positive(r, &[3, 4]), positive(r, &[4, 5])],
            op_matmul
        ),
        case!("transpose", |r| vec![uniform(r, &[3, 4], -1.0, 1.0)], op_transpose),
        case!(
            "softmax_axis0",
            |r| vec![uniform(r, &[5, 4], -2.0, 2.0)],
            |r| vec![uniform(r, &[2, 4], -2.0, 2.0)],
            op_softmax0
        ),
        case!(
            "softmax_axis1",
            |r| vec![uniform(r, &[2, 5, 3], -2.0, 2.0)],
            |r| vec![uniform(r, &[3, 2, 4], -1.0, 1.0)],
            op_softmax1
        ),
        case!("sigmoid", |r| vec![uniform(r, &[2, 7], -4.0, 4.0)], op_sigmoid),
        case!("relu", |r| vec![away_from_zero(r, &[3, 7])], op_relu),
        case!(
            "add_broadcast",
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[1, 3, 1], -1.0, 1.0)],
            op_add
        ),
        case!(
            "mul",
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 3, 4], -1.0, 1.0)],
            |r| vec![positive(r, &[2, 3, 4]), positive(r, &[2, 3, 4])],
            op_mul
        ),
        case!(
            "mul_broadcast",
            |r| vec![uniform(r, &[2, 3, 4, 4], -1.0, 1.0), uniform(r, &[2, 1, 4, 4], -1.0, 1.0)],
            |r| vec![positive(r, &[2, 3, 4, 4]), positive(r, &[2, 1, 4, 4])],
            op_mul
        ),
        case!("scale", |r| vec![uniform(r, &[4, 3], -1.0, 1.0)], op_scale),
        case!(
            "channel_concat",
            |r| vec![uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -1.0, 1.0)],
            op_concat
        ),
        case!(
            "flatten",
            |r| vec![uniform(r, &[3, 2, 4], -1.0, 1.0)],
            |r| vec![positive(r, &[3, 2, 4])],
            op_flatten
        ),
        case!("select_stack", |r| vec![uniform(r, &[2, 3, 2], -1.0, 1.0)], op_select_stack),
        case!("maxpool2d", |r| vec![distinct(r, &[2, 2, 4, 6])], op_maxpool),
        case!("downsample", |r| vec![uniform(r, &[2, 2, 4, 4], -1.0, 1.0)], op_downsample),
        case!("global_avgpool", |r| vec![uniform(r, &[2, 3, 3, 4], -1.0, 1.0)], op_gap),
        case!("channel_max", |r| vec![distinct(r, &[2, 4, 3, 3])], op_channel_max),
        case!("channel_avg", |r| vec![uniform(r, &[2, 4, 3, 3], -1.0, 1.0)], op_channel_avg),
        case!(
            "sum",
            |r| vec![uniform(r, &[3, 3], -1.0, 1.0)],
            |r| vec![positive(r, &[3, 3])],
            op_sum
        ),
        case!(
            "l2_normalize",
            |r| vec![uniform(r, &[3, 5], -1.0, 1.0)],
            |r| vec![opposite_sign_pairs(r, 3)],
            op_l2norm
        ),
        case!("am_softmax_loss", |r| vec![uniform(r, &[4, 2], -1.0, 1.0)], op_am_softmax),
    ]
}
// ---------------------------------------------------------------------------
// Reduced model for whole-network gradient checks
// ---------------------------------------------------------------------------

pub fn reduced_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        widths: vec![4, 8, 8],
        exit_width: 8,
        ..ModelConfig::default()
    }
}

pub fn random_images(rng: &mut ChaCha8Rng, batch: usize, size: usize) -> Tensor<f64> {
    uniform(rng, &[batch, 3, size, size], 0.0, 255.0)
}

/// Moves freshly initialized parameters to a generic point: zero biases put
/// ReLUs over dead regions exactly on their kink, and the 0.01-scale
/// attention matrices make the key paths nearly flat.
pub fn generic_point(params: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed ^ 0x5EED);
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.1..0.1));
        } else if name.ends_with(".w_rgb") || name.ends_with(".w_hf") {
            t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
    }
}

pub const MODEL_EPS: f64 = 1e-5;
pub const MODEL_COMPONENTS_PER_TENSOR: usize = 3;

/// Gradient check of the batch loss of the reduced model, covering the
/// largest-magnitude gradient components of every parameter tensor.
/// Returns the report and the parameter names in input order.
pub fn model_grad_check(seed: u64) -> Result<(GradCheckReport, Vec<String>)> {
    let model = TwoStreamModel::new(reduced_config())?;
    let mut params: ParamStore<f64> = model.init_params(seed)?;
    generic_point(&mut params, seed);
    let images = random_images(&mut rng(seed ^ 0xA5A5), 2, 16);
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let f = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let bound: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
        let out = model.forward(g, &bound, &images)?;
        model.loss(g, &out, &[REAL, FAKE])
    };
    let coverage = Coverage::Largest {
        per_input: MODEL_COMPONENTS_PER_TENSOR,
    };
    let report = grad_check_with(f, &inputs, MODEL_EPS, coverage)?;
    Ok((report, names))
}

pub const OP_EPS: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-5;

/// Outcome of one case at one seed.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Runs every op case and the reduced model in 64-bit mode for seeds
/// `0..seeds`.
pub fn run_suite(seeds: u64) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    for case in grad_cases() {
        for seed in 0..seeds {
            let inputs = (case.inputs)(&mut rng(seed));
            let report = grad_check(case.f64_fn, &inputs, OP_EPS)?;
            entries.push(SuiteEntry {
                name: case.name.to_owned(),
                seed,
                max_rel_error: report.max_rel_error,
                tolerance: OP_TOLERANCE,
            });
        }
    }
    for seed in 0..seeds {
        let (report, _) = model_grad_check(seed)?;
        entries.push(SuiteEntry {
            name: "reduced_model".to_owned(),
            seed,
            max_rel_error: report.max_rel_error,
            tolerance: MODEL_TOLERANCE,
        });
    }
    Ok(entries)
}
