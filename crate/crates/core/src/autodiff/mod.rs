//! Reverse-mode differentiation over tensors.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Nodes are append-only, so a value never changes after it is recorded.
//! [`Graph::backward`] walks the nodes in reverse and returns a
//! [`Gradients`] table with the gradient of every node that depends on a
//! variable, intermediate activations included.

pub mod kernels;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub use kernels::ConvSpec;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    HighPass {
        x: Var,
        kernels: Tensor<T>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sigmoid(Var),
    Relu(Var),
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Select {
        x: Var,
        index: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    GlobalAvgPool(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMean(Var),
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    AmSoftmax {
        cosines: Var,
        labels: Vec<usize>,
        scale: T,
        margin: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of tensor operations.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    branches: Option<u64>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar output with respect to every recorded node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not influence the output
    /// through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, with zeros filled in for unreached nodes.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branches: None,
        }
    }

    /// A graph that fingerprints every branch taken by a non-smooth op
    /// (ReLU masks, max-pool and channel-max winners).
    pub fn tracking_branches() -> Self {
        Self {
            nodes: Vec::new(),
            branches: Some(0xCBF2_9CE4_8422_2325),
        }
    }

    /// Fingerprint of the branches taken so far, if tracking.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    fn record_branches(&mut self, choices: impl Iterator<Item = usize>) {
        if let Some(h) = self.branches.as_mut() {
            for c in choices {
                *h = (*h ^ c as u64).wrapping_mul(0x0100_0000_01B3);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        ))
    }

    /// Fixed zero-sum high-pass filtering; see [`kernels::high_pass_forward`].
    /// The kernels are constants and never receive a gradient.
    pub fn high_pass(&mut self, x: Var, kernels: &Tensor<T>) -> Result<Var> {
        let out = kernels::high_pass_forward(self.value(x), kernels)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::HighPass {
                x,
                kernels: kernels.clone(),
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = kernels::transpose(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if self.branches.is_some() {
            let mask: Vec<usize> = self.value(x).data().iter().map(|&v| usize::from(v > T::zero())).collect();
            self.record_branches(mask.into_iter());
        }
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// `a + b`, where every extent of `b` equals that of `a` or is 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
            .map(|out| self.push_binary(out, a, b, true))
    }

    /// `a ⊙ b`, where every extent of `b` equals that of `a` or is 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
            .map(|out| self.push_binary(out, a, b, false))
    }

    fn binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        kernels::check_broadcast(op, av.shape(), bv.shape())?;
        let mut out = vec![T::zero(); av.numel()];
        let (ad, bd) = (av.data(), bv.data());
        if av.shape() == bv.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
                *o = f(x, y);
            }
        } else {
            kernels::for_each_broadcast(av.shape(), bv.shape(), |ia, ib| out[ia] = f(ad[ia], bd[ib]));
        }
        Tensor::new(av.shape(), out)
    }

    fn push_binary(&mut self, out: Tensor<T>, a: Var, b: Var, is_add: bool) -> Var {
        let rg = self.rg(a) || self.rg(b);
        let op = if is_add { Op::Add { a, b } } else { Op::Mul { a, b } };
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (x, y))| d != axis && x != y) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let run = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * run..(o + 1) * run]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `flt(·)`: `[C,H,W]` to `[C,HW]` in row-major order.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        match *self.shape(x) {
            [c, h, w] => self.reshape(x, &[c, h * w]),
            ref s => Err(Error::invalid("flatten", format!("expected [C,H,W], got {s:?}"))),
        }
    }

    /// Inverse of [`Graph::flatten`].
    pub fn unflatten(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        match *self.shape(x) {
            [c, hw] if hw == h * w => self.reshape(x, &[c, h, w]),
            ref s => Err(Error::invalid("unflatten", format!("cannot view {s:?} as [C,{h},{w}]"))),
        }
    }

    /// Element `index` along the leading axis, dropping that axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        let lead = v.shape()[0];
        if index >= lead || v.rank() < 2 {
            return Err(Error::invalid(
                "select",
                format!("index {index} invalid for shape {:?}", v.shape()),
            ));
        }
        let shape = v.shape()[1..].to_vec();
        let per: usize = shape.iter().product();
        let out = Tensor::new(&shape, v.data()[index * per..(index + 1) * per].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Select { x, index }, rg))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut shape = vec![1];
            shape.extend_from_slice(self.shape(p));
            lifted.push(self.reshape(p, &shape)?);
        }
        self.concat(&lifted, 0)
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2(self.value(x))?;
        self.record_branches(argmax.iter().copied());
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Average-pools to `target×target` when the extents divide evenly.
    pub fn downsample(&mut self, x: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let [_, _, h, w] = self.value(x).dims4()?;
        if target_h == 0 || h % target_h != 0 || w % target_w != 0 || h / target_h != w / target_w {
            return Err(Error::invalid(
                "downsample",
                format!("cannot pool {h}x{w} to {target_h}x{target_w}"),
            ));
        }
        let factor = h / target_h;
        if factor == 1 {
            return Ok(x);
        }
        let out = kernels::avgpool(self.value(x), factor)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool { x, factor }, rg))
    }

    /// `[B,C,H,W]` to `[B,C,1,1]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let inv = T::one() / T::from_usize(h * w).expect("small integer");
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[b, c, 1, 1], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// Maximum over channels: `[B,C,H,W]` to `[B,1,H,W]`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let [b, c, h, w] = v.dims4()?;
        let plane = h * w;
        let mut out = Vec::with_capacity(b * plane);
        let mut argmax = Vec::with_capacity(b * plane);
        for bi in 0..b {
            for p in 0..plane {
                let mut best = bi * c * plane + p;
                for ci in 1..c {
                    let idx = (bi * c + ci) * plane + p;
                    if v.data()[idx] > v.data()[best] {
                        best = idx;
                    }
                }
                out.push(v.data()[best]);
                argmax.push(best);
            }
        }
        let out = Tensor::new(&[b, 1, h, w], out)?;
        self.record_branches(argmax.iter().copied());
        let rg = self.rg(x);
        Ok(self.push(out, Op::ChannelMax { x, argmax }, rg))
    }

    /// Mean over channels: `[B,C,H,W]` to `[B,1,H,W]`.
    pub fn channel_avg(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let [b, c, h, w] = v.dims4()?;
        let plane = h * w;
        let inv = T::one() / T::from_usize(c).expect("small integer");
        let mut out = vec![T::zero(); b * plane];
        for bi in 0..b {
            for ci in 0..c {
                let src = &v.data()[(bi * c + ci) * plane..][..plane];
                for (o, &s) in out[bi * plane..(bi + 1) * plane].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let out = Tensor::new(&[b, 1, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::ChannelMean(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// `Σ x ⊙ weights` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let v = self.value(x);
        if v.shape() != weights.shape() {
            return Err(Error::shape("weighted_sum", v.shape(), weights.shape()));
        }
        let total = v.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// Scales every row of a 2-D tensor to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let [r, c] = v.dims2()?;
        let floor = T::from_f64_lossy(1e-12);
        let mut norms = Vec::with_capacity(r);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|&a| a * a).sum::<T>().sqrt().max(floor);
            row.iter_mut().for_each(|a| *a /= n);
            norms.push(n);
        }
        let out = Tensor::new(&[r, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Additive-margin softmax loss over `[B, K]` cosines, averaged over the
    /// batch. The true-class logit is `scale·(cos_y − margin)`, every other
    /// logit is `scale·cos_j`.
    pub fn am_softmax_loss(&mut self, cosines: Var, labels: &[usize], scale: T, margin: T) -> Result<Var> {
        let v = self.value(cosines);
        let [b, k] = v.dims2()?;
        if labels.len() != b {
            return Err(Error::shape("am_softmax_loss", v.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("am_softmax_loss", format!("label {bad} out of range for {k} classes")));
        }
        if scale <= T::zero() || margin < T::zero() || margin >= T::one() {
            return Err(Error::invalid(
                "am_softmax_loss",
                format!("need s > 0 and 0 <= m < 1, got s={scale}, m={margin}"),
            ));
        }
        let mut total = T::zero();
        for (row, &y) in v.data().chunks(k).zip(labels) {
            let probs = margin_softmax(row, y, scale, margin);
            total -= probs.log_true;
        }
        let loss = total / T::from_usize(b).expect("small integer");
        let rg = self.rg(cosines);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::AmSoftmax {
                cosines,
                labels: labels.to_vec(),
                scale,
                margin,
            },
            rg,
        ))
    }

    /// Gradients of a one-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("output must be a scalar, got shape {:?}", self.shape(output)),
            ));
        }
        self.backward_with(output, Tensor::full(self.shape(output), T::one()))
    }

    /// Gradients given an explicit seed for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("backward", seed.shape(), self.shape(output)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(output) {
            grads[output.0] = Some(seed);
        }
        for i in (0..=output.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, lower)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, lower: &mut [Option<Tensor<T>>], v: Var, contribution: Vec<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut lower[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(Tensor::new(self.shape(v), contribution)?),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, lower: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let need = (self.rg(input), self.rg(weight), bias.is_some_and(|b| self.rg(b)));
                let grads = kernels::conv2d_backward(self.value(input), self.value(weight), g, spec, need)?;
                if let Some(gx) = grads.input {
                    self.accumulate(lower, input, gx.into_data())?;
                }
                if let Some(gw) = grads.weight {
                    self.accumulate(lower, weight, gw.into_data())?;
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    self.accumulate(lower, b, gb.into_data())?;
                }
            }
            Op::HighPass { x, kernels } => {
                let gx = kernels::high_pass_backward(self.shape(*x), kernels, gd)?;
                self.accumulate(lower, *x, gx)?;
            }
            &Op::MatMul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let [m, k] = av.dims2()?;
                let n = bv.shape()[1];
                if self.rg(a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, (n as isize, 1), bv.data(), (1, n as isize), T::zero(), &mut ga, (k as isize, 1));
                    self.accumulate(lower, a, ga)?;
                }
                if self.rg(b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), (1, k as isize), gd, (n as isize, 1), T::zero(), &mut gb, (n as isize, 1));
                    self.accumulate(lower, b, gb)?;
                }
            }
            &Op::Transpose(x) => {
                let gx = kernels::transpose(g)?;
                self.accumulate(lower, x, gx.into_data())?;
            }
            &Op::Softmax { x, axis } => {
                let gx = kernels::softmax_backward(y, gd, axis);
                self.accumulate(lower, x, gx)?;
            }
            &Op::Sigmoid(x) => {
                let gx = y.data().iter().zip(gd).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                self.accumulate(lower, x, gx)?;
            }
            &Op::Relu(x) => {
                let gx = y
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&o, &gv)| if o > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(lower, x, gx)?;
            }
            &Op::Add { a, b } => {
                if self.rg(a) {
                    self.accumulate(lower, a, gd.to_vec())?;
                }
                if self.rg(b) {
                    let gb = kernels::reduce_to(y.shape(), self.shape(b), gd);
                    self.accumulate(lower, b, gb)?;
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let same = av.shape() == bv.shape();
                if self.rg(a) {
                    let mut ga = vec![T::zero(); av.numel()];
                    if same {
                        for ((o, &gv), &bb) in ga.iter_mut().zip(gd).zip(bv.data()) {
                            *o = gv * bb;
                        }
                    } else {
                        kernels::for_each_broadcast(av.shape(), bv.shape(), |ia, ib| ga[ia] = gd[ia] * bv.data()[ib]);
                    }
                    self.accumulate(lower, a, ga)?;
                }
                if self.rg(b) {
                    let prod: Vec<T> = gd.iter().zip(av.data()).map(|(&gv, &aa)| gv * aa).collect();
                    let gb = kernels::reduce_to(av.shape(), bv.shape(), &prod);
                    self.accumulate(lower, b, gb)?;
                }
            }
            &Op::Scale { x, factor } => {
                self.accumulate(lower, x, gd.iter().map(|&gv| gv * factor).collect())?;
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = kernels::axis_split(y.shape(), *axis);
                let total = y.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        self.accumulate(lower, p, gp)?;
                    }
                    offset += len;
                }
            }
            &Op::Reshape(x) => self.accumulate(lower, x, gd.to_vec())?,
            &Op::Select { x, index } => {
                let mut gx = vec![T::zero(); self.value(x).numel()];
                let per = gd.len();
                gx[index * per..(index + 1) * per].copy_from_slice(gd);
                self.accumulate(lower, x, gx)?;
            }
            Op::MaxPool2 { x, argmax } | Op::ChannelMax { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    gx[src] += gv;
                }
                self.accumulate(lower, *x, gx)?;
            }
            &Op::AvgPool { x, factor } => {
                let [b, c, h, w] = self.value(x).dims4()?;
                let (ho, wo) = (h / factor, w / factor);
                let scale = T::one() / T::from_usize(factor * factor).expect("small integer");
                let mut gx = vec![T::zero(); b * c * h * w];
                for p in 0..b * c {
                    for yy in 0..h {
                        for xx in 0..w {
                            gx[p * h * w + yy * w + xx] = gd[p * ho * wo + (yy / factor) * wo + xx / factor] * scale;
                        }
                    }
                }
                self.accumulate(lower, x, gx)?;
            }
            &Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.value(x).dims4()?;
                let inv = T::one() / T::from_usize(h * w).expect("small integer");
                let gx = gd.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, h * w)).collect();
                self.accumulate(lower, x, gx)?;
            }
            &Op::ChannelMean(x) => {
                let [b, c, h, w] = self.value(x).dims4()?;
                let plane = h * w;
                let inv = T::one() / T::from_usize(c).expect("small integer");
                let mut gx = Vec::with_capacity(b * c * plane);
                for bi in 0..b {
                    for _ in 0..c {
                        gx.extend(gd[bi * plane..(bi + 1) * plane].iter().map(|&gv| gv * inv));
                    }
                }
                self.accumulate(lower, x, gx)?;
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                self.accumulate(lower, x, vec![gd[0]; n])?;
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(lower, *x, weights.iter().map(|&w| w * gd[0]).collect())?;
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = y.shape()[1];
                let mut gx = Vec::with_capacity(y.numel());
                for ((yr, gr), &n) in y.data().chunks(c).zip(gd.chunks(c)).zip(norms) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&yy, &gg)| (gg - yy * dot) / n));
                }
                self.accumulate(lower, *x, gx)?;
            }
            Op::AmSoftmax {
                cosines,
                labels,
                scale,
                margin,
            } => {
                let v = self.value(*cosines);
                let k = v.shape()[1];
                let inv_b = gd[0] / T::from_usize(labels.len()).expect("small integer");
                let mut gx = Vec::with_capacity(v.numel());
                for (row, &label) in v.data().chunks(k).zip(labels) {
                    let probs = margin_softmax(row, label, *scale, *margin);
                    for (j, &p) in probs.p.iter().enumerate() {
                        let target = if j == label { T::one() } else { T::zero() };
                        gx.push((p - target) * *scale * inv_b);
                    }
                }
                self.accumulate(lower, *cosines, gx)?;
            }
        }
        Ok(())
    }
}

struct MarginSoftmax<T> {
    p: Vec<T>,
    log_true: T,
}

fn margin_softmax<T: Real>(row: &[T], label: usize, scale: T, margin: T) -> MarginSoftmax<T> {
    let logits: Vec<T> = row
        .iter()
        .enumerate()
        .map(|(j, &c)| if j == label { scale * (c - margin) } else { scale * c })
        .collect();
    let (argmax, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, T::neg_infinity()), |best, (j, l)| if l > best.1 { (j, l) } else { best });
    // log Σ exp(l − max) = log1p(Σ_{j≠argmax} exp(l_j − max)), exact for tiny tails.
    let rest: T = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != argmax)
        .map(|(_, &l)| (l - max).exp())
        .sum();
    let log_total = rest.ln_1p();
    MarginSoftmax {
        p: logits.iter().map(|&l| (l - max - log_total).exp()).collect(),
        log_true: logits[label] - max - log_total,
    }
}
