//! Independent oracles shared by the integration and acceptance tests,
//! plus the library's gradient-check suite.

#![allow(dead_code)]

pub use hff_core::gradsuite::*;
use hff_core::Tensor;

// ---------------------------------------------------------------------------
// Brute-force oracles
// ---------------------------------------------------------------------------

/// Direct zero-padded cross-correlation, one output element at a time.
pub fn conv2d_direct(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let [b, cin, h, wd] = x.dims4().unwrap();
    let [cout, _, kh, kw] = w.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, cout, ho, wo]);
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb.data()[co]);
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at4(co, ci, ki, kj) * x.at4(bi, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data_mut()[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Direct shared-kernel depthwise correlation, kernel-major output.
pub fn depthwise_direct(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize, replicate: bool) -> Tensor<f64> {
    let [b, c, h, wd] = x.dims4().unwrap();
    let [g, _, kh, kw] = w.dims4().unwrap();
    let ho = h + 2 * pad + 1 - kh;
    let wo = wd + 2 * pad + 1 - kw;
    let mut out = Tensor::zeros(&[b, g * c, ho, wo]);
    for bi in 0..b {
        for gi in 0..g {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let mut iy = (oy + ki) as isize - pad as isize;
                                let mut ix = (ox + kj) as isize - pad as isize;
                                if replicate {
                                    iy = iy.clamp(0, h as isize - 1);
                                    ix = ix.clamp(0, wd as isize - 1);
                                } else if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at4(gi, 0, ki, kj) * x.at4(bi, ci, iy as usize, ix as usize);
                            }
                        }
                        out.data_mut()[((bi * g * c + gi * c + ci) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
    }
    out
}

/// SRM kernels typed in independently of the library, divided by divisors,
/// in bank order (SQUARE 3×3, SQUARE 5×5, second order).
pub fn srm_reference_kernels() -> Tensor<f64> {
    let square3 = [
        [0., 0., 0., 0., 0.],
        [0., -1., 2., -1., 0.],
        [0., 2., -4., 2., 0.],
        [0., -1., 2., -1., 0.],
        [0., 0., 0., 0., 0.],
    ];
    let kv = [
        [-1., 2., -2., 2., -1.],
        [2., -6., 8., -6., 2.],
        [-2., 8., -12., 8., -2.],
        [2., -6., 8., -6., 2.],
        [-1., 2., -2., 2., -1.],
    ];
    let second = [
        [0., 0., 0., 0., 0.],
        [0., 0., 0., 0., 0.],
        [0., 1., -2., 1., 0.],
        [0., 0., 0., 0., 0.],
        [0., 0., 0., 0., 0.],
    ];
    let mut data = Vec::new();
    for (k, d) in [(square3, 4.0), (kv, 12.0), (second, 2.0)] {
        for row in k {
            data.extend(row.iter().map(|v| v / d));
        }
    }
    Tensor::new(&[3, 1, 5, 5], data).unwrap()
}

pub fn matmul_naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [m, k] = a.dims2().unwrap();
    let [_, n] = b.dims2().unwrap();
    Tensor::from_fn(&[m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum()
    })
}

/// `max|a − b| / max|b|`.
pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.max_abs_diff(b).unwrap() / scale
}

