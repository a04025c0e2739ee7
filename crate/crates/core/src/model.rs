//! The assembled two-stream detector.
//!
//! ```text
//! X ──► SRM ──► X_h
//! (X, X_h) ──► entry flow ──► (F, F_h)
//!          ──► middle blocks, with DCMA after the configured blocks
//!          ──► exit conv + global average pool per stream
//!          ──► channel-attention fusion ──► L2-normalised embedding
//!          ──► cosines against two L2-normalised class anchors
//! ```
//!
//! Class 0 is real, class 1 is fake.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::dcma::{dcma_forward, DcmaShape};
use crate::entry::{entry_forward, Attention, EntryConfig, Streams};
use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamStore};
use crate::real::Real;
use crate::srm::SrmKernelBank;
use crate::tensor::Tensor;

pub const REAL: usize = 0;
pub const FAKE: usize = 1;

/// Network configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub streams: Streams,
    pub widths: Vec<usize>,
    pub rsa_scales: Vec<usize>,
    pub rsa_kernel: usize,
    pub multiscale: bool,
    /// Number of residual blocks per stream after the entry flow.
    pub middle_blocks: usize,
    /// DCMA positions: `p` means "after `p` middle blocks".
    pub dcma_placements: Vec<usize>,
    pub dcma_reduction: usize,
    pub exit_width: usize,
    pub fusion_reduction: usize,
    pub srm_clip: f64,
    pub loss_s: f64,
    pub loss_m: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            streams: Streams::Both,
            widths: vec![16, 32, 64],
            rsa_scales: vec![2],
            rsa_kernel: 7,
            multiscale: true,
            middle_blocks: 2,
            dcma_placements: vec![0, 1],
            dcma_reduction: 4,
            exit_width: 64,
            fusion_reduction: 4,
            srm_clip: 2.0,
            loss_s: 30.0,
            loss_m: 0.35,
        }
    }
}

impl ModelConfig {
    pub fn entry(&self) -> EntryConfig {
        EntryConfig {
            widths: self.widths.clone(),
            rsa_scales: self.rsa_scales.clone(),
            rsa_kernel: self.rsa_kernel,
            multiscale: self.multiscale,
            streams: self.streams,
        }
    }

    /// Spatial side of the post-entry feature maps.
    pub fn feature_size(&self) -> usize {
        self.input_size >> self.widths.len()
    }

    fn uses_dcma(&self) -> bool {
        self.streams == Streams::Both && !self.dcma_placements.is_empty()
    }

    fn dcma_shape(&self) -> DcmaShape {
        DcmaShape {
            channels: self.entry().out_width(),
            height: self.feature_size(),
            width: self.feature_size(),
            reduction: self.dcma_reduction,
        }
    }

    fn stream_names(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        if self.streams.has_rgb() {
            names.push("rgb");
        }
        if self.streams.has_hf() {
            names.push("hf");
        }
        names
    }

    /// Embedding dimension after fusion.
    pub fn embedding_dim(&self) -> usize {
        self.exit_width * self.stream_names().len()
    }

    pub fn validate(&self) -> Result<()> {
        self.entry().validate()?;
        let factor = 1usize << self.widths.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(Error::invalid(
                "model_config",
                format!("input size {} not divisible by {factor}", self.input_size),
            ));
        }
        if let Some(&p) = self.dcma_placements.iter().find(|&&p| p > self.middle_blocks) {
            return Err(Error::invalid(
                "model_config",
                format!("dcma placement {p} exceeds {} middle blocks", self.middle_blocks),
            ));
        }
        if self.uses_dcma() {
            self.dcma_shape().validate()?;
        }
        let d = self.embedding_dim();
        if self.exit_width == 0 || self.fusion_reduction == 0 || d < self.fusion_reduction {
            return Err(Error::invalid("model_config", "exit width and fusion reduction must be positive"));
        }
        if !(self.loss_s > 0.0) || !(0.0..1.0).contains(&self.loss_m) {
            return Err(Error::invalid(
                "model_config",
                format!("need s > 0 and 0 <= m < 1, got s={}, m={}", self.loss_s, self.loss_m),
            ));
        }
        SrmKernelBank::new(self.srm_clip)?;
        Ok(())
    }
}

/// Graph nodes produced by [`TwoStreamModel::forward`].
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[B, 2]` cosine similarities to the real and fake anchors.
    pub cosines: Var,
    /// `p_fake` per sample, margin-free.
    pub p_fake: Vec<f64>,
    /// Named activations for inspection and Grad-CAM.
    pub cache: BTreeMap<String, Var>,
    /// DCMA attention maps per placement and sample.
    pub dcma_attention: Vec<Vec<(Var, Var)>>,
}

/// Inference result detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub cosines: Tensor<T>,
    pub p_fake: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TwoStreamModel {
    config: ModelConfig,
    bank: SrmKernelBank,
}

impl TwoStreamModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let bank = SrmKernelBank::new(config.srm_clip)?;
        Ok(Self { config, bank })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn bank(&self) -> &SrmKernelBank {
        &self.bank
    }

    /// Deterministic parameter initialization from `seed`.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let cfg = &self.config;
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new();
        cfg.entry().init_params(&mut init, &mut store)?;
        let c = cfg.entry().out_width();
        for stream in cfg.stream_names() {
            for i in 0..cfg.middle_blocks {
                store.insert(format!("middle.{stream}.{i}.weight"), init.he(&[c, c, 3, 3]))?;
                store.insert(format!("middle.{stream}.{i}.bias"), Tensor::zeros(&[c]))?;
            }
            store.insert(format!("exit.{stream}.weight"), init.he(&[cfg.exit_width, c, 3, 3]))?;
            store.insert(format!("exit.{stream}.bias"), Tensor::zeros(&[cfg.exit_width]))?;
        }
        if cfg.uses_dcma() {
            for (i, _) in cfg.dcma_placements.iter().enumerate() {
                cfg.dcma_shape().init_params(&format!("dcma{i}"), &mut init, &mut store)?;
            }
        }
        let d = cfg.embedding_dim();
        let hidden = d / cfg.fusion_reduction;
        store.insert("fusion.fc1.weight", init.he(&[hidden, d]))?;
        store.insert("fusion.fc1.bias", Tensor::zeros(&[hidden]))?;
        store.insert("fusion.fc2.weight", init.normal(&[d, hidden], 0.01))?;
        store.insert("fusion.fc2.bias", Tensor::zeros(&[d]))?;
        store.insert("classifier.weight", init.normal(&[2, d], 1.0))?;
        Ok(store)
    }

    /// Records the forward pass of a `[B,3,S,S]` image batch on the 0..255
    /// scale.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &Bound, images: &Tensor<T>) -> Result<ModelOutput> {
        self.forward_with(g, params, images, Attention::Computed)
    }

    pub fn forward_with<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Bound,
        images: &Tensor<T>,
        attention: Attention,
    ) -> Result<ModelOutput> {
        let cfg = &self.config;
        let [_, c, h, w] = images.dims4()?;
        if c != 3 || h != cfg.input_size || w != cfg.input_size {
            return Err(Error::invalid(
                "forward",
                format!(
                    "expected [B,3,{s},{s}] input, got {:?}",
                    images.shape(),
                    s = cfg.input_size
                ),
            ));
        }
        let x_h = g.constant(self.bank.residual_image(images)?);
        let half = T::from_f64_lossy(127.5);
        let x = g.constant(images.map(|v| v / half - T::one()));

        let entry = entry_forward(g, params, x, x_h, &cfg.entry(), &self.bank, attention)?;
        let mut cache = entry.intermediates;
        let mut rgb = entry.f;
        let mut hf = entry.f_h;
        let mut dcma_attention = Vec::new();
        let spec = ConvSpec::same(3);

        let residual_block = |g: &mut Graph<T>, x: Var, name: &str| -> Result<Var> {
            let c = g.conv2d(
                x,
                params.get(&format!("{name}.weight"))?,
                Some(params.get(&format!("{name}.bias"))?),
                spec,
            )?;
            let r = g.relu(c);
            g.add(x, r)
        };

        for block in 0..=cfg.middle_blocks {
            if cfg.uses_dcma() {
                for (i, _) in cfg.dcma_placements.iter().enumerate().filter(|(_, &p)| p == block) {
                    let (t, t_h) = (rgb.expect("both streams"), hf.expect("both streams"));
                    let out = dcma_forward(g, params, &format!("dcma{i}"), t, t_h)?;
                    cache.insert(format!("dcma{i}.rgb"), out.t);
                    cache.insert(format!("dcma{i}.hf"), out.t_h);
                    rgb = Some(out.t);
                    hf = Some(out.t_h);
                    dcma_attention.push(out.attention);
                }
            }
            if block == cfg.middle_blocks {
                break;
            }
            for (stream, slot) in [("rgb", &mut rgb), ("hf", &mut hf)] {
                if let Some(x) = *slot {
                    let name = format!("middle.{stream}.{block}");
                    let y = residual_block(g, x, &name)?;
                    cache.insert(name, y);
                    *slot = Some(y);
                }
            }
        }

        let mut pooled = Vec::new();
        for (stream, slot) in [("rgb", rgb), ("hf", hf)] {
            if let Some(x) = slot {
                let c = g.conv2d(
                    x,
                    params.get(&format!("exit.{stream}.weight"))?,
                    Some(params.get(&format!("exit.{stream}.bias"))?),
                    spec,
                )?;
                let e = g.relu(c);
                cache.insert(format!("exit.{stream}"), e);
                pooled.push(g.global_avgpool(e)?);
            }
        }
        let fused = fuse(g, params, &pooled)?;
        cache.insert("fused".to_owned(), fused);
        let embedding = g.l2_normalize_rows(fused)?;
        cache.insert("embedding".to_owned(), embedding);
        let anchors = g.l2_normalize_rows(params.get("classifier.weight")?)?;
        let anchors_t = g.transpose(anchors)?;
        let cosines = g.matmul(embedding, anchors_t)?;
        let p_fake = fake_probability(g.value(cosines), cfg.loss_s);
        Ok(ModelOutput {
            cosines,
            p_fake,
            cache,
            dcma_attention,
        })
    }

    /// Batch-mean additive-margin softmax loss for an output of [`Self::forward`].
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, out: &ModelOutput, labels: &[usize]) -> Result<Var> {
        g.am_softmax_loss(
            out.cosines,
            labels,
            T::from_f64_lossy(self.config.loss_s),
            T::from_f64_lossy(self.config.loss_m),
        )
    }

    /// Forward pass without gradient tracking.
    pub fn predict<T: Real>(&self, params: &ParamStore<T>, images: &Tensor<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &bound, images)?;
        Ok(Prediction {
            cosines: g.value(out.cosines).clone(),
            p_fake: out.p_fake,
        })
    }
}

/// Channel-attention fusion of pooled stream features `[B,C,1,1]`.
///
/// `z = concat(streams)`, `gate = sigmoid(fc2(relu(fc1(z))))`,
/// output `gate ⊙ z` of shape `[B, ΣC]`.
pub fn fuse<T: Real>(g: &mut Graph<T>, params: &Bound, pooled: &[Var]) -> Result<Var> {
    let first = *pooled.first().ok_or_else(|| Error::invalid("fuse", "no stream features"))?;
    let [b, c, _, _] = g.value(first).dims4()?;
    let mut flat = Vec::with_capacity(pooled.len());
    for &p in pooled {
        let [pb, pc, ph, pw] = g.value(p).dims4()?;
        if pb != b || pc != c || ph != 1 || pw != 1 {
            return Err(Error::shape("fuse", g.shape(first), g.shape(p)));
        }
        flat.push(g.reshape(p, &[b, c])?);
    }
    let z = g.concat(&flat, 1)?;
    let hidden = linear(g, z, params.get("fusion.fc1.weight")?, params.get("fusion.fc1.bias")?)?;
    let hidden = g.relu(hidden);
    let logits = linear(g, hidden, params.get("fusion.fc2.weight")?, params.get("fusion.fc2.bias")?)?;
    let gate = g.sigmoid(logits);
    g.mul(z, gate)
}

/// `x ⊗ weightᵀ + bias` for `x: [B, in]`, `weight: [out, in]`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let wt = g.transpose(weight)?;
    let y = g.matmul(x, wt)?;
    let out = g.shape(weight)[0];
    let b = g.reshape(bias, &[1, out])?;
    g.add(y, b)
}

/// `exp(s·cos_fake) / (exp(s·cos_fake) + exp(s·cos_real))` per row.
pub fn fake_probability<T: Real>(cosines: &Tensor<T>, scale: f64) -> Vec<f64> {
    cosines
        .data()
        .chunks(2)
        .map(|row| {
            let d = scale * (row[FAKE].to_f64_lossy() - row[REAL].to_f64_lossy());
            if d >= 0.0 {
                1.0 / (1.0 + (-d).exp())
            } else {
                let e = d.exp();
                e / (1.0 + e)
            }
        })
        .collect()
}

/// Video-level score: the mean of per-frame fake probabilities.
pub fn video_level_predict(frame_probs: &[f64]) -> Result<f64> {
    if frame_probs.is_empty() {
        return Err(Error::invalid("video_level_predict", "no frame predictions"));
    }
    if let Some(p) = frame_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid("video_level_predict", format!("probability {p} outside [0, 1]")));
    }
    Ok(frame_probs.iter().sum::<f64>() / frame_probs.len() as f64)
}
