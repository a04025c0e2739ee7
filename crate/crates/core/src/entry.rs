//! Entry flow: two parallel convolution pyramids over the RGB image `X` and
//! its residual image `X_h`.
//!
//! At every scale the RGB features are re-filtered with the SRM bank and
//! injected into the high-frequency stream, and a residual-guided spatial
//! attention map gates the RGB stream at the configured scales.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamStore};
use crate::real::Real;
use crate::srm::{srm_on_features, SrmKernelBank, NUM_KERNELS};
use crate::tensor::Tensor;

/// Channels of the residual image: three kernels per RGB channel.
pub const RESIDUAL_CHANNELS: usize = 3 * NUM_KERNELS;

/// Which streams of the entry flow are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Streams {
    /// RGB and high-frequency streams with SRM injection and attention.
    Both,
    /// RGB stream only.
    Rgb,
    /// High-frequency stream on `X_h` only.
    HighFrequency,
}

impl Streams {
    pub fn has_rgb(self) -> bool {
        matches!(self, Streams::Both | Streams::Rgb)
    }

    pub fn has_hf(self) -> bool {
        matches!(self, Streams::Both | Streams::HighFrequency)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryConfig {
    /// Channel width per scale; its length is the number of scales.
    pub widths: Vec<usize>,
    /// 1-based scales whose RGB features are gated by the attention map.
    pub rsa_scales: Vec<usize>,
    pub rsa_kernel: usize,
    /// Inject SRM residuals of the RGB features into the HF stream.
    pub multiscale: bool,
    pub streams: Streams,
}

impl Default for EntryConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            rsa_scales: vec![2],
            rsa_kernel: 7,
            multiscale: true,
            streams: Streams::Both,
        }
    }
}

impl EntryConfig {
    pub fn num_scales(&self) -> usize {
        self.widths.len()
    }

    pub fn out_width(&self) -> usize {
        *self.widths.last().expect("validated: at least one scale")
    }

    pub fn uses_attention(&self) -> bool {
        self.streams == Streams::Both && !self.rsa_scales.is_empty()
    }

    pub fn uses_injection(&self) -> bool {
        self.streams == Streams::Both && self.multiscale
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid("entry_config", format!("widths must be positive, got {:?}", self.widths)));
        }
        if let Some(&s) = self.rsa_scales.iter().find(|&&s| s == 0 || s > self.num_scales()) {
            return Err(Error::invalid(
                "entry_config",
                format!("rsa scale {s} outside 1..={}", self.num_scales()),
            ));
        }
        if self.rsa_kernel.is_multiple_of(2) {
            return Err(Error::invalid("entry_config", format!("rsa kernel {} must be odd", self.rsa_kernel)));
        }
        Ok(())
    }

    pub fn init_params<T: Real>(&self, init: &mut Initializer, store: &mut ParamStore<T>) -> Result<()> {
        let mut prev_rgb = 3;
        let mut prev_hf = RESIDUAL_CHANNELS;
        for (i, &w) in self.widths.iter().enumerate() {
            let s = i + 1;
            if self.streams.has_rgb() {
                store.insert(format!("entry.rgb.s{s}.weight"), init.he(&[w, prev_rgb, 3, 3]))?;
                store.insert(format!("entry.rgb.s{s}.bias"), Tensor::zeros(&[w]))?;
            }
            if self.streams.has_hf() {
                store.insert(format!("entry.hf.s{s}.weight"), init.he(&[w, prev_hf, 3, 3]))?;
                store.insert(format!("entry.hf.s{s}.bias"), Tensor::zeros(&[w]))?;
            }
            if self.uses_injection() {
                store.insert(format!("entry.align.s{s}.weight"), init.he(&[w, NUM_KERNELS * w, 1, 1]))?;
                store.insert(format!("entry.align.s{s}.bias"), Tensor::zeros(&[w]))?;
            }
            prev_rgb = w;
            prev_hf = w;
        }
        if self.uses_attention() {
            let k = self.rsa_kernel;
            store.insert("entry.rsa.weight", init.he(&[1, 2, k, k]))?;
            store.insert("entry.rsa.bias", Tensor::zeros(&[1]))?;
        }
        Ok(())
    }
}

/// Residual-guided spatial attention
/// `M = sigmoid(conv([channel_max(X_h); channel_avg(X_h)]))`, shape `[B,1,H,W]`.
pub fn rsa_map<T: Real>(g: &mut Graph<T>, x_h: Var, weight: Var, bias: Var) -> Result<Var> {
    let k = g.value(weight).dims4()?[2];
    let max = g.channel_max(x_h)?;
    let avg = g.channel_avg(x_h)?;
    let stacked = g.concat(&[max, avg], 1)?;
    let logits = g.conv2d(stacked, weight, Some(bias), ConvSpec::same(k))?;
    Ok(g.sigmoid(logits))
}

/// Result of [`entry_forward`]. `f`/`f_h` are `None` for an inactive stream.
#[derive(Clone, Debug)]
pub struct EntryOutput {
    pub f: Option<Var>,
    pub f_h: Option<Var>,
    pub attention: Option<Var>,
    /// Every per-scale activation, keyed e.g. `entry.rgb.s1`,
    /// `entry.hf_tilde.s2`, `entry.hf_carry.s3`.
    pub intermediates: BTreeMap<String, Var>,
}

/// How the attention map is obtained.
#[derive(Clone, Copy, Debug)]
pub enum Attention {
    /// Computed from `X_h` by [`rsa_map`].
    Computed,
    /// A caller-supplied `[B,1,H,W]` map.
    Fixed(Var),
}

/// `F, F_h = f_entry(X, X_h)`.
///
/// `x` is the normalised RGB input `[B,3,H,W]` and `x_h` the residual image
/// `[B,9,H,W]`; H and W must be divisible by `2^num_scales`.
pub fn entry_forward<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    x: Var,
    x_h: Var,
    config: &EntryConfig,
    bank: &SrmKernelBank,
    attention: Attention,
) -> Result<EntryOutput> {
    config.validate()?;
    let [_, _, h, w] = g.value(x_h).dims4()?;
    let factor = 1usize << config.num_scales();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(
            "entry_forward",
            format!("input {h}x{w} not divisible by 2^{}", config.num_scales()),
        ));
    }
    if config.streams.has_rgb() && g.shape(x)[2..] != g.shape(x_h)[2..] {
        return Err(Error::shape("entry_forward", g.shape(x), g.shape(x_h)));
    }

    let mut intermediates = BTreeMap::new();
    let m = if config.uses_attention() {
        let m = match attention {
            Attention::Computed => rsa_map(g, x_h, params.get("entry.rsa.weight")?, params.get("entry.rsa.bias")?)?,
            Attention::Fixed(m) => m,
        };
        intermediates.insert("entry.attention".to_owned(), m);
        Some(m)
    } else {
        None
    };

    let spec = ConvSpec::same(3);
    let mut rgb = config.streams.has_rgb().then_some(x);
    let mut hf = config.streams.has_hf().then_some(x_h);
    for s in 1..=config.num_scales() {
        let f_s = match rgb {
            Some(input) => {
                let c = g.conv2d(
                    input,
                    params.get(&format!("entry.rgb.s{s}.weight"))?,
                    Some(params.get(&format!("entry.rgb.s{s}.bias"))?),
                    spec,
                )?;
                let f = g.relu(c);
                intermediates.insert(format!("entry.rgb.s{s}"), f);
                Some(f)
            }
            None => None,
        };
        let fh_s = match hf {
            Some(input) => {
                let c = g.conv2d(
                    input,
                    params.get(&format!("entry.hf.s{s}.weight"))?,
                    Some(params.get(&format!("entry.hf.s{s}.bias"))?),
                    spec,
                )?;
                let f = g.relu(c);
                intermediates.insert(format!("entry.hf.s{s}"), f);
                Some(f)
            }
            None => None,
        };

        let hf_carry = match (fh_s, f_s) {
            (Some(fh), Some(f)) if config.uses_injection() => {
                let tilde = srm_on_features(
                    g,
                    bank,
                    f,
                    params.get(&format!("entry.align.s{s}.weight"))?,
                    Some(params.get(&format!("entry.align.s{s}.bias"))?),
                )?;
                intermediates.insert(format!("entry.hf_tilde.s{s}"), tilde);
                let sum = g.add(fh, tilde)?;
                intermediates.insert(format!("entry.hf_carry.s{s}"), sum);
                Some(sum)
            }
            (fh, _) => fh,
        };

        let rgb_carry = match (f_s, m) {
            (Some(f), Some(m)) if config.rsa_scales.contains(&s) => {
                let [_, _, fh, fw] = g.value(f).dims4()?;
                let m_s = g.downsample(m, fh, fw)?;
                let gated = g.mul(f, m_s)?;
                intermediates.insert(format!("entry.rgb_gated.s{s}"), gated);
                Some(gated)
            }
            (f, _) => f,
        };

        rgb = rgb_carry.map(|v| g.maxpool2d(v)).transpose()?;
        hf = hf_carry.map(|v| g.maxpool2d(v)).transpose()?;
    }
    if let Some(f) = rgb {
        intermediates.insert("entry.rgb.out".to_owned(), f);
    }
    if let Some(f) = hf {
        intermediates.insert("entry.hf.out".to_owned(), f);
    }
    Ok(EntryOutput {
        f: rgb,
        f_h: hf,
        attention: m,
        intermediates,
    })
}
