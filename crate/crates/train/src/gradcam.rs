//! Gradient-weighted class activation maps.

use std::collections::BTreeMap;

use hff_core::autodiff::kernels::bilinear_resize;
use hff_core::model::{TwoStreamModel, FAKE};
use hff_core::{Graph, ParamStore, Tensor, Var};

use crate::error::{Result, TrainError};

/// Heatmap over the input image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn to_image(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([(self.at(x as usize, y as usize) * 255.0).round() as u8])
        })
    }
}

/// Layer names accepted by [`gradcam`] for this model: the cached
/// activations that are spatial maps.
pub fn layer_names(model: &TwoStreamModel, params: &ParamStore<f32>) -> Result<Vec<String>> {
    let s = model.config().input_size;
    let mut g = Graph::<f64>::new();
    let bound = params.cast::<f64>().bind_frozen(&mut g);
    let out = model.forward(&mut g, &bound, &Tensor::zeros(&[1, 3, s, s]))?;
    Ok(spatial_layers(&g, &out.cache))
}

fn spatial_layers(g: &Graph<f64>, cache: &BTreeMap<String, Var>) -> Vec<String> {
    cache
        .iter()
        .filter(|(_, &v)| g.shape(v).len() == 4)
        .map(|(k, _)| k.clone())
        .collect()
}

/// ReLU of the activation channels weighted by the spatial mean of the
/// fake-class cosine's gradient, upsampled to the input size and min-max
/// normalized. A map that is zero everywhere stays zero.
pub fn gradcam(model: &TwoStreamModel, params: &ParamStore<f32>, image: &Tensor<f32>, layer: &str) -> Result<Heatmap> {
    let [b, _, h, w] = image.dims4()?;
    if b != 1 {
        return Err(TrainError::invalid(format!("gradcam takes one image, got a batch of {b}")));
    }
    let mut g = Graph::<f64>::new();
    let bound = params.cast::<f64>().bind(&mut g);
    let out = model.forward(&mut g, &bound, &image.cast::<f64>())?;
    let act = match out.cache.get(layer) {
        Some(&v) if g.shape(v).len() == 4 => v,
        _ => {
            return Err(TrainError::invalid(format!(
                "unknown layer `{layer}` (available: {})",
                spatial_layers(&g, &out.cache).join(", ")
            )))
        }
    };
    let mut seed = Tensor::zeros(&[1, 2]);
    seed.data_mut()[FAKE] = 1.0;
    let grads = g.backward_with(out.cosines, seed)?;
    let a = g.value(act);
    let grad = grads.get_or_zeros(act, a.shape());
    let [_, c, ah, aw] = a.dims4()?;
    let plane = ah * aw;
    let mut cam = vec![0.0; plane];
    for ch in 0..c {
        let gs = &grad.data()[ch * plane..(ch + 1) * plane];
        let weight = gs.iter().sum::<f64>() / plane as f64;
        for (v, &x) in cam.iter_mut().zip(&a.data()[ch * plane..(ch + 1) * plane]) {
            *v += weight * x;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(Heatmap {
        width: w,
        height: h,
        values: normalize(bilinear_resize(&cam, ah, aw, h, w)),
    })
}

/// Min-max normalization of a non-negative map; a constant positive map
/// becomes all ones and an all-zero map stays zero.
pub fn normalize(mut values: Vec<f64>) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= 0.0 {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else if hi > lo {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        values.iter_mut().for_each(|v| *v = 1.0);
    }
    values
}

/// Mean heatmap value over pixels where `inside` holds and where it does not.
pub fn mass_inside_outside(map: &Heatmap, inside: impl Fn(usize, usize) -> bool) -> (f64, f64) {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..map.height {
        for x in 0..map.width {
            if inside(x, y) {
                si += map.at(x, y);
                ni += 1;
            } else {
                so += map.at(x, y);
                no += 1;
            }
        }
    }
    (si / ni.max(1) as f64, so / no.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_cases() {
        assert_eq!(normalize(vec![0.0; 4]), [0.0; 4]);
        assert_eq!(normalize(vec![2.0; 3]), [1.0; 3]);
        assert_eq!(normalize(vec![1.0, 3.0, 2.0]), [0.0, 1.0, 0.5]);
    }

    #[test]
    fn mass_split() {
        let map = Heatmap {
            width: 2,
            height: 2,
            values: vec![1.0, 0.0, 0.5, 0.0],
        };
        assert_eq!(mass_inside_outside(&map, |x, _| x == 0), (0.75, 0.0));
    }
}
