//! Dataset generation, manifests and loading.
//!
//! Layout of a generated dataset directory:
//!
//! ```text
//! manifest.json
//! train/00000.png  train/00000_mask.png  ...
//! val/...
//! test/...
//! ```
//!
//! Each split holds its fakes (grouped by method) followed by as many reals.
//! Every sample's seed is derived from the global seed, the split name and
//! the sample index alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DataError, Result};
use crate::forge::{forge, ForgerySample, Method};
use crate::io::{encode_png, load_gray, load_rgb, sha256_hex, write_bytes};
use crate::synth::gen_base_image;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Range of per-image sensor noise std.
pub const CAMERA_SIGMA: (f64, f64) = (0.5, 2.0);
/// Smallest noise-level gap between a base and its donor.
pub const MIN_SIGMA_GAP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub size: usize,
    /// Consecutive samples of one method sharing a video id.
    pub group_size: usize,
    /// Fake count per method for each split; reals match the fake total.
    pub splits: BTreeMap<String, BTreeMap<Method, usize>>,
}

impl DatasetConfig {
    /// `per_method` fakes of every method in train, a quarter of that in
    /// val and half in test (at least one each).
    pub fn per_method(seed: u64, size: usize, per_method: usize) -> Self {
        let counts = |n: usize| Method::FAKES.iter().map(|&m| (m, n.max(1))).collect();
        let splits = [("train", per_method), ("val", per_method / 4), ("test", per_method / 2)]
            .into_iter()
            .map(|(name, n)| (name.to_owned(), counts(n)))
            .collect();
        Self {
            seed,
            size,
            group_size: 5,
            splits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(DataError::Invalid("group size must be positive".into()));
        }
        for (split, counts) in &self.splits {
            if counts.contains_key(&Method::None) {
                return Err(DataError::Invalid(format!("split `{split}`: reals are implied, not listed")));
            }
            if counts.values().sum::<usize>() == 0 {
                return Err(DataError::Invalid(format!("split `{split}` is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Image path relative to the dataset root.
    pub path: String,
    pub label: u8,
    pub method: Method,
    pub video_id: String,
    pub camera_sigma: f64,
    pub sha256: String,
    /// Tamper mask path, fakes only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub size: usize,
    pub config: DatasetConfig,
    pub splits: BTreeMap<String, Vec<Record>>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization cannot fail")
    }

    /// SHA-256 of the manifest's JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn split(&self, name: &str) -> Result<&[Record]> {
        self.splits.get(name).map(Vec::as_slice).ok_or_else(|| {
            DataError::Invalid(format!(
                "no split `{name}` (available: {})",
                self.splits.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }
}

/// Seed of sample `index` of `split`, independent of every other sample.
pub fn sample_seed(global: u64, split: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update((split.len() as u64).to_le_bytes());
    h.update(split.as_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// One sample of a split: fakes of each method in order, then reals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub index: usize,
    pub method: Method,
    /// Position among samples of the same method in the split.
    pub rank: usize,
}

pub fn split_slots(counts: &BTreeMap<Method, usize>) -> Vec<Slot> {
    let mut slots = Vec::new();
    let reals: usize = counts.values().sum();
    for (&method, &n) in counts.iter().chain([(&Method::None, &reals)]) {
        for rank in 0..n {
            slots.push(Slot {
                index: slots.len(),
                method,
                rank,
            });
        }
    }
    slots
}

/// Generates sample `index` of `split` from scratch.
pub fn generate_sample(global: u64, split: &str, slot: Slot, size: usize) -> Result<ForgerySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(global, split, slot.index));
    let (lo, hi) = CAMERA_SIGMA;
    let base_sigma = rng.random_range(lo..hi);
    let base = gen_base_image(rng.random(), size, base_sigma)?;
    if slot.method == Method::None {
        return Ok(ForgerySample::real(&base));
    }
    let donor_sigma = loop {
        let s = rng.random_range(lo..hi);
        if (s - base_sigma).abs() >= MIN_SIGMA_GAP {
            break s;
        }
    };
    let donor = gen_base_image(rng.random(), size, donor_sigma)?;
    forge(&base, &donor, slot.method, rng.random())
}

fn video_id(split: &str, slot: Slot, group: usize) -> String {
    format!("{split}-{}-{:04}", slot.method, slot.rank / group)
}

/// Writes every split's images, masks and the manifest under `out`.
pub fn build_dataset(config: &DatasetConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| DataError::io(out, e))?;
    let mut splits = BTreeMap::new();
    for (split, counts) in &config.splits {
        let slots = split_slots(counts);
        let encoded: Vec<(Record, Vec<u8>, Option<Vec<u8>>)> = slots
            .par_iter()
            .map(|&slot| {
                let sample = generate_sample(config.seed, split, slot, config.size)?;
                let png = encode_png(&sample.image);
                let path = format!("{split}/{:05}.png", slot.index);
                let (mask, mask_png) = if sample.label == 1 {
                    (Some(format!("{split}/{:05}_mask.png", slot.index)), Some(encode_png(&sample.mask)))
                } else {
                    (None, None)
                };
                let record = Record {
                    path,
                    label: sample.label,
                    method: sample.method,
                    video_id: video_id(split, slot, config.group_size),
                    camera_sigma: sample.camera_sigma,
                    sha256: sha256_hex(&png),
                    mask_sha256: mask_png.as_deref().map(sha256_hex),
                    mask,
                };
                Ok((record, png, mask_png))
            })
            .collect::<Result<_>>()?;
        let mut records = Vec::with_capacity(encoded.len());
        for (record, png, mask_png) in encoded {
            write_bytes(&out.join(&record.path), &png)?;
            if let (Some(path), Some(bytes)) = (&record.mask, mask_png) {
                write_bytes(&out.join(path), &bytes)?;
            }
            records.push(record);
        }
        splits.insert(split.clone(), records);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: config.seed,
        size: config.size,
        config: config.clone(),
        splits,
    };
    write_bytes(&out.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

/// A generated dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: path.display().to_string(),
            source,
        })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(DataError::Invalid(format!(
                "{}: manifest version {} (expected {MANIFEST_VERSION})",
                path.display(),
                manifest.version
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Checks every image and mask against its recorded digest.
    pub fn verify(&self) -> Result<()> {
        let check = |rel: &str, expected: &str| -> Result<()> {
            let path = self.root.join(rel);
            let bytes = fs::read(&path).map_err(|e| DataError::io(&path, e))?;
            let actual = sha256_hex(&bytes);
            if actual != expected {
                return Err(DataError::Digest {
                    path: path.display().to_string(),
                    expected: expected.to_owned(),
                    actual,
                });
            }
            Ok(())
        };
        for record in self.manifest.splits.values().flatten() {
            check(&record.path, &record.sha256)?;
            if let (Some(mask), Some(digest)) = (&record.mask, &record.mask_sha256) {
                check(mask, digest)?;
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[Record]> {
        self.manifest.split(name)
    }

    pub fn image(&self, record: &Record) -> Result<RgbImage> {
        load_rgb(&self.root.join(&record.path))
    }

    /// The tamper mask, or an all-zero mask for a real sample.
    pub fn mask(&self, record: &Record) -> Result<GrayImage> {
        match &record.mask {
            Some(rel) => load_gray(&self.root.join(rel)),
            None => Ok(GrayImage::new(self.manifest.size as u32, self.manifest.size as u32)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_put_reals_last_and_balance_classes() {
        let counts = BTreeMap::from([(Method::B, 2), (Method::A, 3)]);
        let slots = split_slots(&counts);
        assert_eq!(slots.len(), 10);
        assert_eq!(slots[0].method, Method::A);
        assert_eq!(slots[3], Slot { index: 3, method: Method::B, rank: 0 });
        assert!(slots[5..].iter().all(|s| s.method == Method::None));
        assert_eq!(slots[9].rank, 4);
    }

    #[test]
    fn sample_seeds_depend_on_every_component() {
        let s = sample_seed(1, "train", 0);
        assert_eq!(s, sample_seed(1, "train", 0));
        assert_ne!(s, sample_seed(2, "train", 0));
        assert_ne!(s, sample_seed(1, "test", 0));
        assert_ne!(s, sample_seed(1, "train", 1));
    }

    #[test]
    fn per_method_config_shape() {
        let cfg = DatasetConfig::per_method(3, 64, 8);
        assert_eq!(cfg.splits["train"][&Method::C], 8);
        assert_eq!(cfg.splits["val"][&Method::A], 2);
        assert_eq!(cfg.splits["test"][&Method::D], 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn generated_fakes_have_mismatched_noise() {
        let slot = Slot {
            index: 0,
            method: Method::A,
            rank: 0,
        };
        let s = generate_sample(9, "train", slot, 32).unwrap();
        assert_eq!(s.label, 1);
        assert!(s.camera_sigma >= CAMERA_SIGMA.0 && s.camera_sigma < CAMERA_SIGMA.1);
    }
}
