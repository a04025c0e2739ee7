//! Two-stage forgery: a processed donor region is blended into a base image.
//!
//! | method | creation                                  | blending mask        |
//! |--------|-------------------------------------------|----------------------|
//! | A      | Gaussian blur, σ ∈ [1, 2]                 | feathered ellipse    |
//! | B      | 8×8 block quantization, 16 levels         | hard rectangle       |
//! | C      | additive Gaussian noise, std ∈ [4, 8]     | feathered ellipse    |
//! | D      | 2× box downsample, bilinear upsample      | feathered rectangle  |
//!
//! The pasted region's mean colour is then shifted to the base region's mean.

use std::fmt;
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::synth::{add_noise, quantize, BaseImage, Planes};

/// Smallest accepted mask support, as a fraction of the image area.
pub const MIN_SUPPORT: f64 = 0.05;

const MAX_MASK_ATTEMPTS: usize = 256;

/// Manipulation family; `None` marks a pristine sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "none")]
    None,
    A,
    B,
    C,
    D,
}

impl Method {
    pub const FAKES: [Method; 4] = [Method::A, Method::B, Method::C, Method::D];

    pub fn label(self) -> u8 {
        u8::from(self != Method::None)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::None => "none",
            Method::A => "A",
            Method::B => "B",
            Method::C => "C",
            Method::D => "D",
        })
    }
}

impl FromStr for Method {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Method::None),
            "A" | "a" => Ok(Method::A),
            "B" | "b" => Ok(Method::B),
            "C" | "c" => Ok(Method::C),
            "D" | "d" => Ok(Method::D),
            other => Err(DataError::Invalid(format!("unknown method `{other}` (expected none, A, B, C or D)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgerySample {
    pub image: RgbImage,
    pub label: u8,
    pub method: Method,
    /// Blend weight ×255: 0 outside the tamper, 255 in its core.
    pub mask: GrayImage,
    pub camera_sigma: f64,
}

impl ForgerySample {
    pub fn real(base: &BaseImage) -> Self {
        let s = base.image.width();
        Self {
            image: base.image.clone(),
            label: 0,
            method: Method::None,
            mask: GrayImage::new(s, s),
            camera_sigma: base.camera_sigma,
        }
    }
}

/// Blends a processed copy of `donor` into `base` under a method-specific
/// mask. Bytes where the mask is zero are copied from `base` unchanged.
pub fn forge(base: &BaseImage, donor: &BaseImage, method: Method, seed: u64) -> Result<ForgerySample> {
    if method == Method::None {
        return Err(DataError::Invalid("cannot forge with method `none`".into()));
    }
    if base.image.dimensions() != donor.image.dimensions() || base.image.width() != base.image.height() {
        return Err(DataError::Invalid(format!(
            "base {:?} and donor {:?} must be equal squares",
            base.image.dimensions(),
            donor.image.dimensions()
        )));
    }
    if base.camera_sigma == donor.camera_sigma {
        return Err(DataError::Invalid(format!(
            "base and donor share camera sigma {}; their noise signatures must differ",
            base.camera_sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = base.image.width() as usize;
    let alpha = sample_mask(method, size, &mut rng)?;
    let patch = create(method, &Planes::from_image(&donor.image), &mut rng);
    let image = blend(&base.image, patch, &alpha)?;
    Ok(ForgerySample {
        image,
        label: 1,
        method,
        mask: mask_image(&alpha, size),
        camera_sigma: base.camera_sigma,
    })
}

/// Stage 1: method-specific processing of the donor.
fn create(method: Method, donor: &Planes, rng: &mut ChaCha8Rng) -> Planes {
    match method {
        Method::A => gaussian_blur(donor, rng.random_range(1.0..2.0)),
        Method::B => block_quantize(donor, 8, 16.0),
        Method::C => {
            let mut p = donor.clone();
            add_noise(&mut p, rng.random_range(4.0..8.0), rng);
            p
        }
        Method::D => down_up(donor),
        Method::None => unreachable!("rejected by forge"),
    }
}

/// Stage 2: mean-colour correction and alpha blending.
///
/// Fails if the mask's support is below [`MIN_SUPPORT`].
pub fn blend(base: &RgbImage, mut patch: Planes, alpha: &[f64]) -> Result<RgbImage> {
    let size = base.width() as usize;
    let n = size * size;
    if patch.size != size || alpha.len() != n {
        return Err(DataError::Invalid("patch and mask must match the base image".into()));
    }
    let weight: f64 = alpha.iter().sum();
    let support = alpha.iter().filter(|&&a| quantize(a * 255.0) > 0).count();
    if (support as f64) < MIN_SUPPORT * n as f64 {
        return Err(DataError::Invalid(format!(
            "mask support {support} px is below {:.0}% of the image",
            MIN_SUPPORT * 100.0
        )));
    }
    let base_planes = Planes::from_image(base);
    for c in 0..3 {
        let weighted_mean = |p: &[f64]| p.iter().zip(alpha).map(|(v, a)| v * a).sum::<f64>() / weight;
        let shift = weighted_mean(base_planes.plane(c)) - weighted_mean(patch.plane(c));
        patch.plane_mut(c).iter_mut().for_each(|v| *v += shift);
    }
    let mut out = base.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let i = y as usize * size + x as usize;
        // Zero mask bytes keep the base bytes exactly.
        if quantize(alpha[i] * 255.0) == 0 {
            continue;
        }
        let a = alpha[i];
        for c in 0..3 {
            px[c] = quantize(a * patch.data[c * n + i] + (1.0 - a) * base_planes.data[c * n + i]);
        }
    }
    Ok(out)
}

fn mask_image(alpha: &[f64], size: usize) -> GrayImage {
    GrayImage::from_fn(size as u32, size as u32, |x, y| image::Luma([quantize(alpha[y as usize * size + x as usize] * 255.0)]))
}

/// Draws blend weights for `method`, retrying until the support is large
/// enough. Weights that would round to a zero byte are set to exactly zero.
fn sample_mask(method: Method, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let s = size as f64;
    for _ in 0..MAX_MASK_ATTEMPTS {
        let cx = rng.random_range(0.3..0.7) * s;
        let cy = rng.random_range(0.3..0.7) * s;
        let rx = rng.random_range(0.10..0.25) * s;
        let ry = rng.random_range(0.10..0.25) * s;
        let feather = rng.random_range(1.5..3.0);
        let mut alpha = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                // Distance outside the shape, in pixels; zero or negative inside.
                let a = match method {
                    Method::A | Method::C => {
                        let rho = ((dx / rx).powi(2) + (dy / ry).powi(2)).sqrt();
                        feathered((rho - 1.0) * rx.min(ry), feather)
                    }
                    Method::B => f64::from(dx.abs() <= rx && dy.abs() <= ry),
                    Method::D => {
                        let ox = (dx.abs() - rx).max(0.0);
                        let oy = (dy.abs() - ry).max(0.0);
                        feathered((ox * ox + oy * oy).sqrt(), feather)
                    }
                    Method::None => unreachable!("rejected by forge"),
                };
                alpha[y * size + x] = if quantize(a * 255.0) == 0 { 0.0 } else { a };
            }
        }
        let support = alpha.iter().filter(|&&a| a > 0.0).count();
        if support as f64 >= MIN_SUPPORT * (size * size) as f64 {
            return Ok(alpha);
        }
    }
    Err(DataError::Invalid(format!("no mask with {MIN_SUPPORT} support after {MAX_MASK_ATTEMPTS} draws")))
}

fn feathered(outside: f64, width: f64) -> f64 {
    if outside <= 0.0 {
        1.0
    } else {
        (-(outside * outside) / (2.0 * width * width)).exp()
    }
}

pub fn gaussian_blur(p: &Planes, sigma: f64) -> Planes {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / total).collect();
    let s = p.size as isize;
    let clamp = |i: isize| i.clamp(0, s - 1) as usize;
    let mut out = Planes::zeros(p.size);
    let mut tmp = vec![0.0; p.data.len() / 3];
    for c in 0..3 {
        let src = p.plane(c);
        for y in 0..s {
            for x in 0..s {
                tmp[(y * s + x) as usize] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * src[(y * s) as usize + clamp(x + k as isize - radius)])
                    .sum();
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..s {
            for x in 0..s {
                dst[(y * s + x) as usize] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp[clamp(y + k as isize - radius) * s as usize + x as usize])
                    .sum();
            }
        }
    }
    out
}

/// Quantizes each pixel's deviation from its block mean with the given step.
pub fn block_quantize(p: &Planes, block: usize, step: f64) -> Planes {
    let s = p.size;
    let mut out = p.clone();
    for c in 0..3 {
        let plane = out.plane_mut(c);
        for by in (0..s).step_by(block) {
            for bx in (0..s).step_by(block) {
                let ys = by..(by + block).min(s);
                let xs = bx..(bx + block).min(s);
                let count = (ys.len() * xs.len()) as f64;
                let mean = ys.clone().flat_map(|y| xs.clone().map(move |x| (y, x))).map(|(y, x)| plane[y * s + x]).sum::<f64>() / count;
                for y in ys.clone() {
                    for x in xs.clone() {
                        let v = &mut plane[y * s + x];
                        *v = mean + step * ((*v - mean) / step).round();
                    }
                }
            }
        }
    }
    out
}

/// 2×2 box downsample followed by bilinear upsampling to the input size.
pub fn down_up(p: &Planes) -> Planes {
    let s = p.size;
    let h = s.div_ceil(2);
    let mut out = Planes::zeros(s);
    for c in 0..3 {
        let src = p.plane(c);
        let at = |y: usize, x: usize| src[y.min(s - 1) * s + x.min(s - 1)];
        let small: Vec<f64> = (0..h * h)
            .map(|i| {
                let (y, x) = (2 * (i / h), 2 * (i % h));
                (at(y, x) + at(y, x + 1) + at(y + 1, x) + at(y + 1, x + 1)) / 4.0
            })
            .collect();
        let dst = out.plane_mut(c);
        for y in 0..s {
            for x in 0..s {
                let sy = ((y as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (h - 1) as f64);
                let sx = ((x as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (h - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(h - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let top = small[y0 * h + x0] * (1.0 - fx) + small[y0 * h + x1] * fx;
                let bottom = small[y1 * h + x0] * (1.0 - fx) + small[y1 * h + x1] * fx;
                dst[y * s + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}
