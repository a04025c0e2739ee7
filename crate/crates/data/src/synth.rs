//! Procedural stand-ins for pristine frames.

use std::f64::consts::TAU;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DataError, Result};

pub const MIN_SIZE: usize = 32;

/// Floating-point RGB planes, channel-major `[3, size, size]`, 0..255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; 3 * size * size],
        }
    }

    pub fn from_image(img: &RgbImage) -> Self {
        let size = img.width() as usize;
        let mut p = Self::zeros(size);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                p.data[(c * size + y as usize) * size + x as usize] = px[c] as f64;
            }
        }
        p
    }

    /// Rounds to the nearest byte, clamping to 0..=255.
    pub fn to_image(&self) -> RgbImage {
        let s = self.size;
        RgbImage::from_fn(s as u32, s as u32, |x, y| {
            let at = |c: usize| quantize(self.data[(c * s + y as usize) * s + x as usize]);
            image::Rgb([at(0), at(1), at(2)])
        })
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.size * self.size;
        &mut self.data[c * n..(c + 1) * n]
    }
}

pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// A pristine image together with the sensor-noise level it was made with.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseImage {
    pub image: RgbImage,
    pub camera_sigma: f64,
    pub shapes: Vec<SoftShape>,
}

/// An ellipse with a logistic edge, blended over the background.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftShape {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
    pub edge: f64,
    pub color: [f64; 3],
}

impl SoftShape {
    /// Coverage in `[0, 1]` at pixel centre `(x, y)`.
    pub fn alpha(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let rho = (u * u + v * v).sqrt();
        // Signed distance to the boundary, approximately in pixels.
        let d = (1.0 - rho) * self.rx.min(self.ry);
        1.0 / (1.0 + (-d / self.edge).exp())
    }

    /// True where the edge is visibly partial.
    pub fn is_boundary(&self, x: f64, y: f64) -> bool {
        let a = self.alpha(x, y);
        a > 1e-3 && a < 1.0 - 1e-3
    }
}

/// Smooth colour field of 3–6 low-frequency cosine waves plus 1–3 soft
/// ellipses and additive Gaussian sensor noise of std `camera_sigma`.
pub fn gen_base_image(seed: u64, size: usize, camera_sigma: f64) -> Result<BaseImage> {
    if size < MIN_SIZE {
        return Err(DataError::Invalid(format!("image size {size} below minimum {MIN_SIZE}")));
    }
    if !(camera_sigma >= 0.0 && camera_sigma.is_finite()) {
        return Err(DataError::Invalid(format!("camera sigma must be finite and >= 0, got {camera_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut p = Planes::zeros(size);

    let mean: [f64; 3] = std::array::from_fn(|_| rng.random_range(70.0..180.0));
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(3..=6))
        .map(|_| {
            let freq = rng.random_range(0.3..1.5);
            let dir = rng.random_range(0.0..TAU);
            let phase = rng.random_range(0.0..TAU);
            let amp = std::array::from_fn(|_| rng.random_range(-22.0..22.0));
            (freq * dir.cos(), freq * dir.sin(), phase, amp)
        })
        .collect();
    let shapes: Vec<SoftShape> = (0..rng.random_range(1..=3))
        .map(|_| SoftShape {
            cx: rng.random_range(0.1..0.9) * s,
            cy: rng.random_range(0.1..0.9) * s,
            rx: rng.random_range(0.06..0.2) * s,
            ry: rng.random_range(0.06..0.2) * s,
            angle: rng.random_range(0.0..TAU),
            edge: rng.random_range(0.6..1.5),
            color: std::array::from_fn(|_| rng.random_range(30.0..225.0)),
        })
        .collect();

    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = mean;
            for (kx, ky, phase, amp) in &waves {
                let w = (TAU * (kx * fx + ky * fy) / s + phase).cos();
                for c in 0..3 {
                    v[c] += amp[c] * w;
                }
            }
            for shape in &shapes {
                let a = shape.alpha(fx, fy);
                for c in 0..3 {
                    v[c] = a * shape.color[c] + (1.0 - a) * v[c];
                }
            }
            for c in 0..3 {
                p.data[(c * size + y) * size + x] = v[c];
            }
        }
    }
    add_noise(&mut p, camera_sigma, &mut rng);
    Ok(BaseImage {
        image: p.to_image(),
        camera_sigma,
        shapes,
    })
}

pub(crate) fn add_noise(p: &mut Planes, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    p.data.iter_mut().for_each(|v| *v += normal.sample(rng));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_images_and_bad_sigma() {
        assert!(gen_base_image(0, 16, 1.0).is_err());
        assert!(gen_base_image(0, 64, -1.0).is_err());
        assert!(gen_base_image(0, 64, f64::NAN).is_err());
    }

    #[test]
    fn planes_round_trip_bytes() {
        let img = gen_base_image(3, 32, 1.5).unwrap().image;
        assert_eq!(Planes::from_image(&img).to_image(), img);
    }

    #[test]
    fn shape_alpha_is_half_on_the_boundary() {
        let shape = SoftShape {
            cx: 10.0,
            cy: 10.0,
            rx: 4.0,
            ry: 4.0,
            angle: 0.3,
            edge: 1.0,
            color: [0.0; 3],
        };
        assert!((shape.alpha(14.0, 10.0) - 0.5).abs() < 1e-12);
        assert!(shape.alpha(10.0, 10.0) > 0.98);
        assert!(shape.alpha(30.0, 30.0) < 1e-6);
    }
}
