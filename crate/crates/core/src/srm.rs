//! Fixed SRM high-pass filter bank.
//!
//! Three canonical 5×5 residual kernels from the spatial rich model:
//!
//! | index | kernel        | divisor | centre |
//! |-------|---------------|---------|--------|
//! | 0     | SQUARE 3×3    | 4       | −4     |
//! | 1     | SQUARE 5×5 (KV) | 12    | −12    |
//! | 2     | 2nd order 1-D | 2       | −2     |
//!
//! Filtering is cross-correlation with edge-replicate padding of 2, so any
//! spatially constant input yields an exactly zero residual everywhere.
//! All three kernels are symmetric under 180° rotation, so correlation and
//! convolution agree.

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

const SQUARE3: [[i32; 5]; 5] = [
    [0, 0, 0, 0, 0],
    [0, -1, 2, -1, 0],
    [0, 2, -4, 2, 0],
    [0, -1, 2, -1, 0],
    [0, 0, 0, 0, 0],
];

const SQUARE5: [[i32; 5]; 5] = [
    [-1, 2, -2, 2, -1],
    [2, -6, 8, -6, 2],
    [-2, 8, -12, 8, -2],
    [2, -6, 8, -6, 2],
    [-1, 2, -2, 2, -1],
];

const SECOND_ORDER: [[i32; 5]; 5] = [
    [0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0],
    [0, 1, -2, 1, 0],
    [0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0],
];

/// Number of kernels in the bank.
pub const NUM_KERNELS: usize = 3;

/// Kernel side length.
pub const KERNEL_SIZE: usize = 5;

/// The frozen SRM kernels plus the residual truncation threshold τ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrmKernelBank {
    clip_threshold: f64,
}

impl Default for SrmKernelBank {
    fn default() -> Self {
        Self { clip_threshold: 2.0 }
    }
}

impl SrmKernelBank {
    pub const INTEGER_KERNELS: [[[i32; 5]; 5]; NUM_KERNELS] = [SQUARE3, SQUARE5, SECOND_ORDER];
    pub const DIVISORS: [i32; NUM_KERNELS] = [4, 12, 2];

    /// `clip_threshold` of 0 disables truncation.
    pub fn new(clip_threshold: f64) -> Result<Self> {
        if !(clip_threshold >= 0.0 && clip_threshold.is_finite()) {
            return Err(Error::invalid(
                "srm",
                format!("clip threshold must be finite and >= 0, got {clip_threshold}"),
            ));
        }
        Ok(Self { clip_threshold })
    }

    pub fn clip_threshold(&self) -> f64 {
        self.clip_threshold
    }

    /// Kernels divided by their divisors, shape `[3, 1, 5, 5]`.
    pub fn kernels<T: Real>(&self) -> Tensor<T> {
        kernel_tensor(|v, d| v as f64 / d as f64)
    }

    /// Convolution geometry for applying [`Self::kernels`] as a depthwise
    /// correlation (used by oracles; the bank itself pads by replication).
    pub fn conv_spec() -> ConvSpec {
        ConvSpec::depthwise_same(KERNEL_SIZE)
    }

    /// Residual image `X_h: [B, 9, H, W]` of an RGB image `X: [B, 3, H, W]`
    /// on the 0..255 scale, clipped to `[−τ, τ]` when τ > 0.
    pub fn residual_image<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, _, _] = x.dims4()?;
        if c != 3 {
            return Err(Error::invalid(
                "srm_residual_image",
                format!("expected a 3-channel image, got shape {:?}", x.shape()),
            ));
        }
        // Integer taps keep the sums exact on 8-bit data; one division per
        // output is then correctly rounded.
        let mut out = crate::autodiff::kernels::high_pass_forward(x, &kernel_tensor::<T>(|v, _| v as f64))?;
        let plane = x.shape()[2] * x.shape()[3];
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let d = T::from_f64_lossy(Self::DIVISORS[(i % (3 * NUM_KERNELS)) / 3] as f64);
            chunk.iter_mut().for_each(|v| *v /= d);
        }
        if self.clip_threshold > 0.0 {
            let tau = T::from_f64_lossy(self.clip_threshold);
            out.data_mut().iter_mut().for_each(|v| *v = v.max(-tau).min(tau));
        }
        Ok(out)
    }

    /// Unclipped residuals of a feature map `[B, C, H, W]` as a graph node
    /// `[B, 3C, H, W]`. Gradients flow to the input only.
    pub fn residual_features<T: Real>(&self, g: &mut Graph<T>, f: Var) -> Result<Var> {
        g.high_pass(f, &self.kernels())
    }
}

fn kernel_tensor<T: Real>(value: impl Fn(i32, i32) -> f64) -> Tensor<T> {
    let mut data = Vec::with_capacity(NUM_KERNELS * KERNEL_SIZE * KERNEL_SIZE);
    for (k, d) in SrmKernelBank::INTEGER_KERNELS.iter().zip(SrmKernelBank::DIVISORS) {
        for row in k {
            data.extend(row.iter().map(|&v| T::from_f64_lossy(value(v, d))));
        }
    }
    Tensor::new(&[NUM_KERNELS, 1, KERNEL_SIZE, KERNEL_SIZE], data).expect("static shape")
}

/// `F̃_h`: SRM residuals of a feature map followed by the learnable 1×1
/// convolution `align_weight: [C', 3C, 1, 1]` that aligns channel counts.
pub fn srm_on_features<T: Real>(
    g: &mut Graph<T>,
    bank: &SrmKernelBank,
    f: Var,
    align_weight: Var,
    align_bias: Option<Var>,
) -> Result<Var> {
    let c = g.value(f).dims4()?[1];
    let w = g.value(align_weight).dims4()?;
    if w[1] != NUM_KERNELS * c || w[2] != 1 || w[3] != 1 {
        return Err(Error::shape("srm_on_features", g.shape(f), g.shape(align_weight)));
    }
    let residual = bank.residual_features(g, f)?;
    g.conv2d(residual, align_weight, align_bias, ConvSpec::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_sum_to_zero() {
        for k in SrmKernelBank::INTEGER_KERNELS {
            assert_eq!(k.iter().flatten().sum::<i32>(), 0);
        }
    }

    #[test]
    fn kernels_are_point_symmetric() {
        for k in SrmKernelBank::INTEGER_KERNELS {
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(k[i][j], k[4 - i][4 - j]);
                }
            }
        }
    }

    #[test]
    fn centre_coefficient_is_minus_one_after_division() {
        let k = SrmKernelBank::default().kernels::<f64>();
        for g in 0..3 {
            assert_eq!(k.data()[g * 25 + 12], -1.0);
        }
    }

    #[test]
    fn constant_image_gives_exact_zero() {
        let bank = SrmKernelBank::default();
        for value in [0.0f32, 17.0, 254.3, 255.0] {
            let x = Tensor::full(&[2, 3, 9, 11], value);
            let r = bank.residual_image(&x).unwrap();
            assert_eq!(r.shape(), &[2, 9, 9, 11]);
            assert!(r.data().iter().all(|&v| v == 0.0), "value {value}");
        }
    }

    #[test]
    fn impulse_response_and_clipping() {
        let mut x = Tensor::<f64>::zeros(&[1, 3, 9, 9]);
        for c in 0..3 {
            x.data_mut()[c * 81 + 4 * 9 + 4] = 1.0;
        }
        let r = SrmKernelBank::new(0.0).unwrap().residual_image(&x).unwrap();
        for ch in 0..9 {
            assert!((r.at4(0, ch, 4, 4) + 1.0).abs() < 1e-12);
        }
        let big = x.map(|v| v * 10.0);
        let r = SrmKernelBank::default().residual_image(&big).unwrap();
        for ch in 0..9 {
            assert_eq!(r.at4(0, ch, 4, 4), -2.0);
        }
        assert!(r.data().iter().all(|v| v.abs() <= 2.0));
    }

    #[test]
    fn rejects_non_rgb() {
        let x = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        assert!(SrmKernelBank::default().residual_image(&x).is_err());
    }

    #[test]
    fn feature_alignment_checks_channels() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros(&[1, 4, 6, 6]));
        let w = g.variable(Tensor::zeros(&[2, 8, 1, 1]));
        assert!(srm_on_features(&mut g, &SrmKernelBank::default(), f, w, None).is_err());
    }

    #[test]
    fn zero_alignment_gives_zero_output() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_fn(&[1, 2, 6, 6], |i| (i as f64 * 0.37).sin()));
        let w = g.variable(Tensor::zeros(&[3, 6, 1, 1]));
        let b = g.variable(Tensor::zeros(&[3]));
        let out = srm_on_features(&mut g, &SrmKernelBank::default(), f, w, Some(b)).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_features_give_bias() {
        let mut g = Graph::<f32>::new();
        let f = g.constant(Tensor::full(&[1, 2, 6, 6], 0.3));
        let w = g.variable(Tensor::full(&[3, 6, 1, 1], 0.7));
        let b = g.variable(Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
        let out = srm_on_features(&mut g, &SrmKernelBank::default(), f, w, Some(b)).unwrap();
        let v = g.value(out);
        for ch in 0..3 {
            for p in 0..36 {
                assert_eq!(v.data()[ch * 36 + p], [0.5, -1.0, 2.0][ch]);
            }
        }
    }
}
