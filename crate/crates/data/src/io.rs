//! PNG files and conversion to network input tensors.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use hff_core::srm::SrmKernelBank;
use hff_core::Tensor;
use image::{EncodableLayout, GrayImage, ImageBuffer, ImageFormat, PixelWithColorType, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{DataError, Result};

/// Lossless PNG bytes; identical images always encode identically.
pub fn encode_png<P>(img: &ImageBuffer<P, Vec<P::Subpixel>>) -> Vec<u8>
where
    P: PixelWithColorType,
    [P::Subpixel]: EncodableLayout,
{
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding cannot fail");
    buf.into_inner()
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write_bytes(path, &encode_png(img))
}

pub fn save_gray(path: &Path, img: &GrayImage) -> Result<()> {
    write_bytes(path, &encode_png(img))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|source| DataError::Image {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(open(path)?.to_rgb8())
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(open(path)?.to_luma8())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stacks equal-sized images into a `[B, 3, H, W]` tensor on the 0..255 scale.
pub fn images_to_tensor(images: &[&RgbImage]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| DataError::Invalid("no images to batch".into()))?;
    let (w, h) = first.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; images.len() * 3 * h * w];
    for (b, img) in images.iter().enumerate() {
        if img.dimensions() != first.dimensions() {
            return Err(DataError::Invalid(format!(
                "image {b} is {:?}, expected {:?}",
                img.dimensions(),
                first.dimensions()
            )));
        }
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[((b * 3 + c) * h + y as usize) * w + x as usize] = px[c] as f32;
            }
        }
    }
    Tensor::new(&[images.len(), 3, h, w], data).map_err(|e| DataError::Invalid(e.to_string()))
}

/// Min-max normalizes a plane to 8-bit gray; a constant plane maps to 0.
pub fn plane_to_gray(values: &[f64], width: usize, height: usize) -> GrayImage {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let v = values[y as usize * width + x as usize];
        let n = if range > 0.0 { (v - lo) / range } else { 0.0 };
        image::Luma([(n * 255.0).round() as u8])
    })
}

/// Mean absolute clipped SRM residual over pixels whose mask byte is 255
/// and over pixels whose mask byte is 0, as `(inside, outside)`.
pub fn residual_magnitudes(image: &RgbImage, mask: &GrayImage) -> Result<(f64, f64)> {
    let x = images_to_tensor(&[image])?.cast::<f64>();
    let residual = SrmKernelBank::default()
        .residual_image(&x)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let (w, h) = image.dimensions();
    let plane = (w * h) as usize;
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for (i, m) in mask.pixels().enumerate() {
        let mag: f64 = (0..9).map(|ch| residual.data()[ch * plane + i].abs()).sum::<f64>() / 9.0;
        match m[0] {
            255 => {
                inside += mag;
                n_in += 1;
            }
            0 => {
                outside += mag;
                n_out += 1;
            }
            _ => {}
        }
    }
    if n_in == 0 || n_out == 0 {
        return Err(DataError::Invalid("mask needs both core and untouched pixels".into()));
    }
    Ok((inside / n_in as f64, outside / n_out as f64))
}
