//! Forward and backward kernels on plain tensors.
//!
//! These are the numeric bodies behind [`Graph`](super::Graph) nodes. They
//! are also used directly on constant inputs (e.g. the SRM residual image),
//! where no differentiation graph is needed.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Convolution hyper-parameters.
///
/// Convolution is cross-correlation: the kernel is not flipped.
///
/// In depthwise mode the weight has shape `[G, 1, kh, kw]` and each of the
/// `G` kernels is applied to every input channel separately. The output has
/// `G·Cin` channels in kernel-major order: channel `g·Cin + c` holds kernel
/// `g` applied to input channel `c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
}

impl ConvSpec {
    pub const fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
            depthwise: false,
        }
    }

    pub const fn depthwise_same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
            depthwise: true,
        }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: 0,
            depthwise: false,
        }
    }
}

/// Output shape of a convolution, validating every precondition.
pub fn conv2d_output_shape(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<[usize; 4]> {
    let (&[b, cin, h, wd], &[cout, wcin, kh, kw]) = (x, w) else {
        return Err(Error::shape("conv2d", x, w));
    };
    if spec.depthwise {
        if wcin != 1 {
            return Err(Error::shape("conv2d (depthwise)", x, w));
        }
    } else if wcin != cin {
        return Err(Error::shape("conv2d", x, w));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid("conv2d", format!("kernel {kh}x{kw} must be odd")));
    }
    if spec.stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let span_h = h + 2 * spec.pad;
    let span_w = wd + 2 * spec.pad;
    if span_h < kh || span_w < kw {
        return Err(Error::shape("conv2d", x, w));
    }
    if !(span_h - kh).is_multiple_of(spec.stride) || !(span_w - kw).is_multiple_of(spec.stride) {
        return Err(Error::invalid(
            "conv2d",
            format!(
                "non-integer output extent for input {h}x{wd}, kernel {kh}x{kw}, pad {}, stride {}",
                spec.pad, spec.stride
            ),
        ));
    }
    let ho = (span_h - kh) / spec.stride + 1;
    let wo = (span_w - kw) / spec.stride + 1;
    let out_c = if spec.depthwise { cout * cin } else { cout };
    Ok([b, out_c, ho, wo])
}

fn check_bias<T: Real>(bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != channels {
            return Err(Error::shape("conv2d bias", b.shape(), &[channels]));
        }
    }
    Ok(())
}

/// Range of output positions whose tap `k` lands inside `0..len`.
#[inline]
fn valid_range(len: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // i = o*stride + k - pad must satisfy 0 <= i < len.
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad <= k {
        0
    } else {
        ((len + pad - k - 1) / stride + 1).min(out)
    };
    (lo, hi.max(lo))
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.h, g.ho, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(g.w, g.wo, kj, g.stride, g.pad);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst.fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        drow[ox] = src[ox * g.stride + kj - g.pad];
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.cin {
        let xc = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.h, g.ho, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(g.w, g.wo, kj, g.stride, g.pad);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let dst = &mut xc[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        dst[ox * g.stride + kj - g.pad] += srow[ox];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `x: [B,Cin,H,W]` with `w`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let [b, cout, ho, wo] = conv2d_output_shape(x.shape(), w.shape(), spec)?;
    check_bias(bias, cout)?;
    let [_, cin, h, wd] = x.dims4()?;
    let [wk, _, kh, kw] = w.dims4()?;
    let geo = Geometry {
        cin,
        h,
        w: wd,
        kh,
        kw,
        ho,
        wo,
        stride: spec.stride,
        pad: spec.pad,
    };
    let plane = ho * wo;
    let mut out = vec![T::zero(); b * cout * plane];
    if spec.depthwise {
        depthwise_forward(x.data(), w.data(), wk, b, &geo, &mut out);
    } else {
        let k = cin * kh * kw;
        let mut cols = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * plane]
        };
        for bi in 0..b {
            let xb = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let cols_ref: &[T] = if geo.is_pointwise() {
                xb
            } else {
                im2col(xb, &geo, &mut cols);
                &cols
            };
            let ob = &mut out[bi * cout * plane..(bi + 1) * cout * plane];
            T::gemm(
                cout,
                k,
                plane,
                w.data(),
                (k as isize, 1),
                cols_ref,
                (plane as isize, 1),
                T::zero(),
                ob,
                (plane as isize, 1),
            );
        }
    }
    if let Some(bias) = bias {
        for chunk in out.chunks_mut(plane).enumerate() {
            let bv = bias.data()[chunk.0 % cout];
            chunk.1.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(&[b, cout, ho, wo], out)
}

fn depthwise_forward<T: Real>(
    x: &[T],
    w: &[T],
    kernels: usize,
    batch: usize,
    g: &Geometry,
    out: &mut [T],
) {
    let plane = g.ho * g.wo;
    for bi in 0..batch {
        for k in 0..kernels {
            for ci in 0..g.cin {
                let xc = &x[(bi * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                let oc = (bi * kernels * g.cin + k * g.cin + ci) * plane;
                let dst = &mut out[oc..oc + plane];
                for ki in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(g.h, g.ho, ki, g.stride, g.pad);
                    for kj in 0..g.kw {
                        let wv = w[(k * g.kh + ki) * g.kw + kj];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(g.w, g.wo, kj, g.stride, g.pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ki - g.pad;
                            let src = &xc[iy * g.w..(iy + 1) * g.w];
                            let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                            for ox in ox_lo..ox_hi {
                                drow[ox] += wv * src[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution, computed only where requested.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    spec: ConvSpec,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let [b, cout, ho, wo] = conv2d_output_shape(x.shape(), w.shape(), spec)?;
    if gout.shape() != [b, cout, ho, wo] {
        return Err(Error::shape("conv2d backward", gout.shape(), &[b, cout, ho, wo]));
    }
    let [_, cin, h, wd] = x.dims4()?;
    let [wk, _, kh, kw] = w.dims4()?;
    let geo = Geometry {
        cin,
        h,
        w: wd,
        kh,
        kw,
        ho,
        wo,
        stride: spec.stride,
        pad: spec.pad,
    };
    let plane = ho * wo;
    let (need_x, need_w, need_b) = need;
    let mut gx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.numel()]);
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); cout];
        for (i, chunk) in gout.data().chunks(plane).enumerate() {
            gb[i % cout] += chunk.iter().copied().sum::<T>();
        }
        gb
    });

    if spec.depthwise {
        depthwise_backward(x.data(), w.data(), gout.data(), wk, b, &geo, gx.as_deref_mut(), gw.as_deref_mut());
    } else if need_x || need_w {
        let k = cin * kh * kw;
        let pointwise = geo.is_pointwise();
        let mut cols = vec![T::zero(); if pointwise { 0 } else { k * plane }];
        let mut gcols = vec![T::zero(); if need_x && !pointwise { k * plane } else { 0 }];
        for bi in 0..b {
            let xb = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let gb_out = &gout.data()[bi * cout * plane..(bi + 1) * cout * plane];
            if let Some(gw) = gw.as_mut() {
                let cols_ref: &[T] = if pointwise {
                    xb
                } else {
                    im2col(xb, &geo, &mut cols);
                    &cols
                };
                T::gemm(
                    cout,
                    plane,
                    k,
                    gb_out,
                    (plane as isize, 1),
                    cols_ref,
                    (1, plane as isize),
                    T::one(),
                    gw,
                    (k as isize, 1),
                );
            }
            if let Some(gx) = gx.as_mut() {
                let gxb = &mut gx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                if pointwise {
                    T::gemm(
                        k,
                        cout,
                        plane,
                        w.data(),
                        (1, k as isize),
                        gb_out,
                        (plane as isize, 1),
                        T::zero(),
                        gxb,
                        (plane as isize, 1),
                    );
                } else {
                    T::gemm(
                        k,
                        cout,
                        plane,
                        w.data(),
                        (1, k as isize),
                        gb_out,
                        (plane as isize, 1),
                        T::zero(),
                        &mut gcols,
                        (plane as isize, 1),
                    );
                    col2im(&gcols, &geo, gxb);
                }
            }
        }
    }

    Ok(ConvGrads {
        input: gx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        weight: gw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
        bias: gb.map(|d| Tensor::new(&[cout], d)).transpose()?,
    })
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    kernels: usize,
    batch: usize,
    g: &Geometry,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let plane = g.ho * g.wo;
    for bi in 0..batch {
        for k in 0..kernels {
            for ci in 0..g.cin {
                let xoff = (bi * g.cin + ci) * g.h * g.w;
                let xc = &x[xoff..xoff + g.h * g.w];
                let oc = (bi * kernels * g.cin + k * g.cin + ci) * plane;
                let go = &gout[oc..oc + plane];
                for ki in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(g.h, g.ho, ki, g.stride, g.pad);
                    for kj in 0..g.kw {
                        let widx = (k * g.kh + ki) * g.kw + kj;
                        let wv = w[widx];
                        let (ox_lo, ox_hi) = valid_range(g.w, g.wo, kj, g.stride, g.pad);
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ki - g.pad;
                            let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                            if gw.is_some() {
                                let src = &xc[iy * g.w..(iy + 1) * g.w];
                                for ox in ox_lo..ox_hi {
                                    acc += src[ox * g.stride + kj - g.pad] * grow[ox];
                                }
                            }
                            if let Some(gx) = gx.as_deref_mut() {
                                if wv != T::zero() {
                                    let dst = &mut gx[xoff + iy * g.w..xoff + (iy + 1) * g.w];
                                    for ox in ox_lo..ox_hi {
                                        dst[ox * g.stride + kj - g.pad] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Zero-sum high-pass filtering with edge-replicate padding.
///
/// `kernels` has shape `[G, 1, k, k]` with odd `k` and every kernel summing
/// to zero. Each kernel is applied to every channel of `x: [B,C,H,W]`; the
/// output `[B, G·C, H, W]` is kernel-major like depthwise [`ConvSpec`].
///
/// The response is evaluated as `Σ_j w_j·(x_j − x_center)`, which equals the
/// plain correlation `Σ_j w_j·x_j` for zero-sum kernels and is exactly zero
/// on any spatially constant input, borders included.
pub fn high_pass_forward<T: Real>(x: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    let (g, k) = high_pass_geometry(kernels)?;
    let p = k / 2;
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut padded = vec![T::zero(); ph * pw];
    let mut out = vec![T::zero(); b * g * c * h * w];
    let kd = kernels.data();
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x.data()[(bi * c + ci) * h * w..][..h * w];
            pad_replicate(plane, h, w, p, &mut padded);
            for gi in 0..g {
                let dst = &mut out[((bi * g + gi) * c + ci) * h * w..][..h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = kd[(gi * k + ki) * k + kj];
                        if wv == T::zero() || (ki == p && kj == p) {
                            continue;
                        }
                        for y in 0..h {
                            let tap = &padded[(y + ki) * pw + kj..][..w];
                            let centre = &padded[(y + p) * pw + p..][..w];
                            let drow = &mut dst[y * w..(y + 1) * w];
                            for xx in 0..w {
                                drow[xx] += wv * (tap[xx] - centre[xx]);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, g * c, h, w], out)
}

/// Gradient of [`high_pass_forward`] with respect to its input.
pub fn high_pass_backward<T: Real>(x_shape: &[usize], kernels: &Tensor<T>, gout: &[T]) -> Result<Vec<T>> {
    let &[b, c, h, w] = x_shape else {
        return Err(Error::invalid("high_pass", format!("expected 4-D input, got {x_shape:?}")));
    };
    let (g, k) = high_pass_geometry(kernels)?;
    let p = k / 2;
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let kd = kernels.data();
    let mut gx = vec![T::zero(); b * c * h * w];
    let mut gpad = vec![T::zero(); ph * pw];
    for bi in 0..b {
        for ci in 0..c {
            gpad.fill(T::zero());
            for gi in 0..g {
                let go = &gout[((bi * g + gi) * c + ci) * h * w..][..h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = kd[(gi * k + ki) * k + kj];
                        if wv == T::zero() || (ki == p && kj == p) {
                            continue;
                        }
                        for y in 0..h {
                            let grow = &go[y * w..(y + 1) * w];
                            for xx in 0..w {
                                let d = wv * grow[xx];
                                gpad[(y + ki) * pw + kj + xx] += d;
                                gpad[(y + p) * pw + p + xx] -= d;
                            }
                        }
                    }
                }
            }
            // Fold the padded gradient back onto the replicated source pixels.
            let dst = &mut gx[(bi * c + ci) * h * w..][..h * w];
            for py in 0..ph {
                let sy = py.saturating_sub(p).min(h - 1);
                for px in 0..pw {
                    let sx = px.saturating_sub(p).min(w - 1);
                    dst[sy * w + sx] += gpad[py * pw + px];
                }
            }
        }
    }
    Ok(gx)
}

fn high_pass_geometry<T: Real>(kernels: &Tensor<T>) -> Result<(usize, usize)> {
    let [g, one, kh, kw] = kernels.dims4()?;
    if one != 1 || kh != kw || kh % 2 == 0 {
        return Err(Error::invalid(
            "high_pass",
            format!("kernels must be [G,1,k,k] with odd k, got {:?}", kernels.shape()),
        ));
    }
    Ok((g, kh))
}

fn pad_replicate<T: Real>(plane: &[T], h: usize, w: usize, p: usize, out: &mut [T]) {
    let pw = w + 2 * p;
    for py in 0..h + 2 * p {
        let sy = py.saturating_sub(p).min(h - 1);
        let src = &plane[sy * w..(sy + 1) * w];
        let row = &mut out[py * pw..(py + 1) * pw];
        row[..p].fill(src[0]);
        row[p..p + w].copy_from_slice(src);
        row[p + w..].fill(src[w - 1]);
    }
}

/// Row-major matrix product of two 2-D tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.dims2()?;
    let [k2, n] = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), T::zero(), &mut out, (n as isize, 1));
    Tensor::new(&[m, n], out)
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, n] = a.dims2()?;
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::invalid(
            "softmax",
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(src[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                out[base + j * inner] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Softmax backward given its output `y`.
pub fn softmax_backward<T: Real>(y: &Tensor<T>, g: &[T], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let yd = y.data();
    let mut gx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                let idx = base + j * inner;
                dot += g[idx] * yd[idx];
            }
            for j in 0..len {
                let idx = base + j * inner;
                gx[idx] = yd[idx] * (g[idx] - dot);
            }
        }
    }
    gx
}

/// Calls `f(index_in_a, index_in_b)` for every element of `a_shape`, where
/// `b_shape` has the same rank and every extent either matches or is 1.
pub(crate) fn for_each_broadcast(a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = a_shape.len();
    let mut b_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        b_strides[d] = if b_shape[d] == 1 { 0 } else { acc };
        acc *= b_shape[d];
    }
    // Innermost axis handled as a contiguous run.
    let last = rank - 1;
    let run = a_shape[last];
    let outer: usize = a_shape[..last].iter().product();
    let mut counter = vec![0usize; last];
    let mut b_base = 0usize;
    for o in 0..outer {
        let a_base = o * run;
        for j in 0..run {
            f(a_base + j, b_base + j * b_strides[last]);
        }
        // Advance the odometer over the outer axes.
        for d in (0..last).rev() {
            counter[d] += 1;
            b_base += b_strides[d];
            if counter[d] < a_shape[d] {
                break;
            }
            b_base -= b_strides[d] * a_shape[d];
            counter[d] = 0;
        }
    }
}

pub(crate) fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

/// Sums `g` (shaped like `a_shape`) down to `b_shape`.
pub(crate) fn reduce_to<T: Real>(a_shape: &[usize], b_shape: &[usize], g: &[T]) -> Vec<T> {
    if a_shape == b_shape {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); b_shape.iter().product()];
    for_each_broadcast(a_shape, b_shape, |ia, ib| out[ib] += g[ia]);
    out
}

/// 2×2 max-pooling with stride 2. Returns the output and, for every output
/// element, the flat index of the winning input element (first on ties).
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("maxpool2d", format!("extents {h}x{w} must be even")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    let d = x.data();
    for p in 0..b * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[b, c, ho, wo], out)?, arg))
}

/// Average pooling with a square window of side `factor` and equal stride.
pub fn avgpool<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(
            "avgpool",
            format!("extents {h}x{w} not divisible by {factor}"),
        ));
    }
    let (ho, wo) = (h / factor, w / factor);
    let scale = T::one() / T::from_usize(factor * factor).expect("small integer");
    let mut out = vec![T::zero(); b * c * ho * wo];
    let d = x.data();
    for p in 0..b * c {
        for y in 0..h {
            for xx in 0..w {
                out[p * ho * wo + (y / factor) * wo + xx / factor] += d[p * h * w + y * w + xx];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(&[b, c, ho, wo], out)
}

/// Bilinear resize of a single `h×w` plane (align-corners = false).
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[oy * ow + ox] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}
