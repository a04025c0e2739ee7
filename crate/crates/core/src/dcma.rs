//! Dual cross-modality attention.
//!
//! Given RGB features `T` and high-frequency features `T_h` of shape
//! `[C,H,W]` (per sample):
//!
//! ```text
//! V,   K   = value(T),   key2(relu(key1_rgb(T)))
//! V_h, K_h = value_h(T_h), key2(relu(key1_hf(T_h)))
//! C   = flt(K)ᵀ ⊗ flt(K_h)                      [HW, HW]
//! A   = softmax(C ⊗ W),   A_h = softmax(Cᵀ ⊗ W_h)  (each column sums to 1)
//! T'  = T   + unflt(flt(V_h) ⊗ A)
//! T_h'= T_h + unflt(flt(V)   ⊗ A_h)
//! ```
//!
//! The second key layer is shared between modalities.

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Shape of one DCMA block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DcmaShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub reduction: usize,
}

impl DcmaShape {
    pub fn key_channels(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) || self.channels < self.reduction {
            return Err(Error::invalid(
                "dcma",
                format!("reduction {} must divide channels {}", self.reduction, self.channels),
            ));
        }
        Ok(())
    }

    /// Registers the block's parameters under `prefix`.
    pub fn init_params<T: Real>(&self, prefix: &str, init: &mut Initializer, store: &mut ParamStore<T>) -> Result<()> {
        self.validate()?;
        let (c, ck, hw) = (self.channels, self.key_channels(), self.positions());
        for stream in ["rgb", "hf"] {
            store.insert(format!("{prefix}.value.{stream}.weight"), init.he(&[c, c, 3, 3]))?;
            store.insert(format!("{prefix}.value.{stream}.bias"), Tensor::zeros(&[c]))?;
            store.insert(format!("{prefix}.key1.{stream}.weight"), init.he(&[ck, c, 3, 3]))?;
            store.insert(format!("{prefix}.key1.{stream}.bias"), Tensor::zeros(&[ck]))?;
        }
        store.insert(format!("{prefix}.key2.weight"), init.he(&[ck, ck, 3, 3]))?;
        store.insert(format!("{prefix}.key2.bias"), Tensor::zeros(&[ck]))?;
        store.insert(format!("{prefix}.w_rgb"), init.normal(&[hw, hw], 0.01))?;
        store.insert(format!("{prefix}.w_hf"), init.normal(&[hw, hw], 0.01))?;
        Ok(())
    }
}

/// `C = flt(K)ᵀ ⊗ flt(K_h)` for single-sample keys `[C/r, H, W]`.
pub fn correlation<T: Real>(g: &mut Graph<T>, k: Var, k_h: Var) -> Result<Var> {
    if g.shape(k) != g.shape(k_h) {
        return Err(Error::shape("correlation", g.shape(k), g.shape(k_h)));
    }
    let kf = g.flatten(k)?;
    let khf = g.flatten(k_h)?;
    let kt = g.transpose(kf)?;
    g.matmul(kt, khf)
}

/// Outputs of [`dcma_forward`].
#[derive(Clone, Debug)]
pub struct DcmaOutput {
    pub t: Var,
    pub t_h: Var,
    /// Per-sample `A` and `A_h`, each `[HW, HW]`.
    pub attention: Vec<(Var, Var)>,
}

/// `T', T_h' = f_DCMA(T, T_h)` on `[B,C,H,W]` inputs, parameters under `prefix`.
pub fn dcma_forward<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    prefix: &str,
    t: Var,
    t_h: Var,
) -> Result<DcmaOutput> {
    if g.shape(t) != g.shape(t_h) {
        return Err(Error::shape("dcma", g.shape(t), g.shape(t_h)));
    }
    let [b, c, h, w] = g.value(t).dims4()?;
    let w_rgb = params.get(&format!("{prefix}.w_rgb"))?;
    let w_hf = params.get(&format!("{prefix}.w_hf"))?;
    for wm in [w_rgb, w_hf] {
        if g.shape(wm) != [h * w, h * w] {
            return Err(Error::invalid(
                "dcma",
                format!("weight matrix {:?} does not match {h}x{w} = {} positions", g.shape(wm), h * w),
            ));
        }
    }
    let p = |name: &str| params.get(&format!("{prefix}.{name}"));
    let spec = ConvSpec::same(3);

    let v = g.conv2d(t, p("value.rgb.weight")?, Some(p("value.rgb.bias")?), spec)?;
    let v_h = g.conv2d(t_h, p("value.hf.weight")?, Some(p("value.hf.bias")?), spec)?;
    let key = |g: &mut Graph<T>, input: Var, stream: &str| -> Result<Var> {
        let k1 = g.conv2d(
            input,
            p(&format!("key1.{stream}.weight"))?,
            Some(p(&format!("key1.{stream}.bias"))?),
            spec,
        )?;
        let k1 = g.relu(k1);
        g.conv2d(k1, p("key2.weight")?, Some(p("key2.bias")?), spec)
    };
    let k = key(g, t, "rgb")?;
    let k_h = key(g, t_h, "hf")?;

    let mut refined = Vec::with_capacity(b);
    let mut refined_h = Vec::with_capacity(b);
    let mut attention = Vec::with_capacity(b);
    for i in 0..b {
        let ki = g.select(k, i)?;
        let khi = g.select(k_h, i)?;
        let corr = correlation(g, ki, khi)?;
        let logits = g.matmul(corr, w_rgb)?;
        let a = g.softmax(logits, 0)?;
        let corr_t = g.transpose(corr)?;
        let logits_h = g.matmul(corr_t, w_hf)?;
        let a_h = g.softmax(logits_h, 0)?;

        let vi = g.select(v, i)?;
        let vhi = g.select(v_h, i)?;
        let vf = g.flatten(vi)?;
        let vhf = g.flatten(vhi)?;
        let r = g.matmul(vhf, a)?;
        let r_h = g.matmul(vf, a_h)?;
        refined.push(g.unflatten(r, h, w)?);
        refined_h.push(g.unflatten(r_h, h, w)?);
        attention.push((a, a_h));
    }
    let r = g.stack(&refined)?;
    let r_h = g.stack(&refined_h)?;
    debug_assert_eq!(g.shape(r), [b, c, h, w]);
    let t_out = g.add(t, r)?;
    let t_h_out = g.add(t_h, r_h)?;
    Ok(DcmaOutput {
        t: t_out,
        t_h: t_h_out,
        attention,
    })
}
