//! In-memory samples, subset selection and batching.

use hff_core::Tensor;
use hff_data::io::images_to_tensor;
use hff_data::{Dataset, Method, Record};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainMethod;
use crate::error::{Result, TrainError};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Image path relative to the dataset root.
    pub id: String,
    pub label: u8,
    pub method: Method,
    pub video_id: String,
    pub image: RgbImage,
}

impl Sample {
    fn load(dataset: &Dataset, record: &Record) -> Result<Self> {
        Ok(Self {
            id: record.path.clone(),
            label: record.label,
            method: record.method,
            video_id: record.video_id.clone(),
            image: dataset.image(record)?,
        })
    }
}

/// Reads every image of `split`. The parallel mode only changes how bytes
/// are read; the returned order is always manifest order.
pub fn load_split(dataset: &Dataset, split: &str, parallel: bool) -> Result<Vec<Sample>> {
    let records = dataset.split(split)?;
    if parallel {
        records.par_iter().map(|r| Sample::load(dataset, r)).collect()
    } else {
        records.iter().map(|r| Sample::load(dataset, r)).collect()
    }
}

fn count(samples: &[Sample], idx: &[usize]) -> (usize, usize) {
    let fakes = idx.iter().filter(|&&i| samples[i].label == 1).count();
    (fakes, idx.len() - fakes)
}

fn require_both(samples: &[Sample], idx: &[usize], what: &str) -> Result<()> {
    match count(samples, idx) {
        (0, reals) => Err(TrainError::invalid(format!("{what} is degenerate: no fakes among {reals} samples"))),
        (fakes, 0) => Err(TrainError::invalid(format!("{what} is degenerate: no reals among {fakes} samples"))),
        _ => Ok(()),
    }
}

/// Training indices: fakes of the selected family plus reals. When one
/// family is selected, reals are subsampled (seeded) down to the fake count.
pub fn training_subset(samples: &[Sample], method: TrainMethod, seed: u64) -> Result<Vec<usize>> {
    let fakes: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].label == 1 && method.includes(samples[i].method))
        .collect();
    let mut reals: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == 0).collect();
    if matches!(method, TrainMethod::Only(_)) && reals.len() > fakes.len() {
        reals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7265_616c));
        reals.truncate(fakes.len());
        reals.sort_unstable();
    }
    let mut idx = fakes;
    idx.extend(reals);
    require_both(samples, &idx, &format!("training set for method {method}"))?;
    Ok(idx)
}

/// Fakes of the selected family plus every real, in manifest order.
pub fn eval_subset(samples: &[Sample], method: TrainMethod) -> Vec<usize> {
    (0..samples.len())
        .filter(|&i| samples[i].label == 0 || method.includes(samples[i].method))
        .collect()
}

pub fn has_both_classes(samples: &[Sample], idx: &[usize]) -> bool {
    let (f, r) = count(samples, idx);
    f > 0 && r > 0
}

/// `[B, 3, S, S]` batch of the selected samples.
pub fn batch_tensor(samples: &[Sample], idx: &[usize]) -> Result<Tensor<f32>> {
    let images: Vec<&RgbImage> = idx.iter().map(|&i| &samples[i].image).collect();
    Ok(images_to_tensor(&images)?)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn fake_samples(methods: &[Method]) -> Vec<Sample> {
        methods
            .iter()
            .enumerate()
            .map(|(i, &m)| Sample {
                id: format!("s{i}"),
                label: u8::from(m != Method::None),
                method: m,
                video_id: format!("v{}", i / 2),
                image: RgbImage::from_pixel(4, 4, image::Rgb([i as u8; 3])),
            })
            .collect()
    }

    #[test]
    fn single_method_training_balances_reals() {
        use Method::*;
        let s = fake_samples(&[A, A, B, None, None, None, None, None]);
        let idx = training_subset(&s, TrainMethod::Only(A), 3).unwrap();
        assert_eq!(&idx[..2], [0, 1]);
        assert_eq!(idx.len(), 4);
        assert!(idx[2..].iter().all(|&i| s[i].label == 0));
        assert_eq!(idx, training_subset(&s, TrainMethod::Only(A), 3).unwrap());
        assert_eq!(training_subset(&s, TrainMethod::All, 3).unwrap().len(), 8);
    }

    #[test]
    fn degenerate_sets_are_rejected() {
        use Method::*;
        let reals = fake_samples(&[None, None]);
        assert!(training_subset(&reals, TrainMethod::All, 0).unwrap_err().to_string().contains("degenerate"));
        let no_b = fake_samples(&[A, None]);
        assert!(training_subset(&no_b, TrainMethod::Only(B), 0).is_err());
    }

    #[test]
    fn eval_subset_keeps_all_reals() {
        use Method::*;
        let s = fake_samples(&[A, B, None, None]);
        assert_eq!(eval_subset(&s, TrainMethod::Only(B)), [1, 2, 3]);
        assert!(has_both_classes(&s, &[0, 2]));
        assert!(!has_both_classes(&s, &[2, 3]));
    }
}
