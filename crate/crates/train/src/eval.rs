//! Checkpoints with run metadata, evaluation reports and the
//! train-on-one, test-on-all protocol.

use std::collections::BTreeMap;
use std::path::Path;

use hff_core::checkpoint::{load_checkpoint, save_checkpoint};
use hff_core::model::{video_level_predict, TwoStreamModel};
use hff_core::ParamStore;
use hff_data::{Dataset, Method};
use serde::{Deserialize, Serialize};

use crate::config::{TrainConfig, TrainMethod};
use crate::error::{Result, TrainError};
use crate::metrics::{accuracy, auc};
use crate::samples::{load_split, Sample};
use crate::train::{predict_scores, train_on, EpochLog};

pub const THRESHOLD: f64 = 0.5;

pub fn build_id() -> String {
    format!("hff-{}-{}", env!("CARGO_PKG_VERSION"), env!("HFF_GIT_DESCRIBE"))
}

/// Metadata echoed into every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub config: TrainConfig,
    pub train_method: TrainMethod,
    pub manifest_digest: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub meta: RunMeta,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.meta).expect("metadata serialization cannot fail");
        Ok(save_checkpoint(path, &self.params, &json)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, json) = load_checkpoint(path)?;
        let meta: RunMeta = serde_json::from_str(&json).map_err(|source| TrainError::Json {
            path: path.display().to_string(),
            source,
        })?;
        meta.config.validate()?;
        Ok(Self { params, meta })
    }

    pub fn model(&self) -> Result<TwoStreamModel> {
        Ok(TwoStreamModel::new(self.meta.config.model.clone())?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub auc: f64,
    pub fakes: usize,
    pub reals: usize,
}

/// One train-method × test-method AUC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCell {
    /// Mean over seeds.
    pub auc: f64,
    pub per_seed: Vec<f64>,
    /// Samples scored per seed (fakes of the test method plus all reals).
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub train_method: TrainMethod,
    /// All fakes against all reals; means over seeds for cross evaluation.
    pub overall: Metrics,
    /// Fakes of each method against all reals.
    pub per_method: BTreeMap<Method, Metrics>,
    pub video_auc: f64,
    pub videos: usize,
    pub cross_method: BTreeMap<TrainMethod, BTreeMap<Method, CrossCell>>,
    pub seeds: Vec<u64>,
    pub config: TrainConfig,
    pub manifest_digest: String,
    pub build_id: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        hff_data::io::write_bytes(path, self.to_json().as_bytes())?;
        Ok(())
    }
}

/// Scored split before aggregation into a report.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSummary {
    pub overall: Metrics,
    pub per_method: BTreeMap<Method, Metrics>,
    pub video_auc: f64,
    pub videos: usize,
}

fn metrics(scores: &[f64], labels: &[u8]) -> Result<Metrics> {
    let fakes = labels.iter().filter(|&&l| l == 1).count();
    Ok(Metrics {
        accuracy: accuracy(scores, labels, THRESHOLD)?,
        auc: auc(scores, labels)?,
        fakes,
        reals: labels.len() - fakes,
    })
}

/// Frame metrics per method and overall, plus video-level AUC, from one
/// fake probability per sample.
pub fn summarize(samples: &[Sample], scores: &[f64]) -> Result<ScoreSummary> {
    if samples.len() != scores.len() {
        return Err(TrainError::invalid(format!("{} scores for {} samples", scores.len(), samples.len())));
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let overall = metrics(scores, &labels)?;
    let mut per_method = BTreeMap::new();
    for method in Method::FAKES {
        let pick: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].label == 0 || samples[i].method == method)
            .collect();
        if pick.iter().all(|&i| samples[i].label == 0) {
            continue;
        }
        let s: Vec<f64> = pick.iter().map(|&i| scores[i]).collect();
        let l: Vec<u8> = pick.iter().map(|&i| labels[i]).collect();
        per_method.insert(method, metrics(&s, &l)?);
    }
    let mut videos: BTreeMap<&str, (u8, Vec<f64>)> = BTreeMap::new();
    for (s, &p) in samples.iter().zip(scores) {
        let entry = videos.entry(&s.video_id).or_insert((s.label, Vec::new()));
        if entry.0 != s.label {
            return Err(TrainError::invalid(format!("video {} mixes real and fake frames", s.video_id)));
        }
        entry.1.push(p);
    }
    let mut video_scores = Vec::with_capacity(videos.len());
    let mut video_labels = Vec::with_capacity(videos.len());
    for (label, probs) in videos.values() {
        video_scores.push(video_level_predict(probs)?);
        video_labels.push(*label);
    }
    Ok(ScoreSummary {
        overall,
        per_method,
        video_auc: auc(&video_scores, &video_labels)?,
        videos: videos.len(),
    })
}

fn row(summary: &ScoreSummary) -> BTreeMap<Method, CrossCell> {
    summary
        .per_method
        .iter()
        .map(|(&m, x)| {
            let cell = CrossCell {
                auc: x.auc,
                per_seed: vec![x.auc],
                count: x.fakes + x.reals,
            };
            (m, cell)
        })
        .collect()
}

/// Scores `split` with a trained checkpoint.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, split: &str) -> Result<EvalReport> {
    let samples = load_split(dataset, split, false)?;
    evaluate_samples(checkpoint, &samples, split, &dataset.manifest.digest())
}

pub fn evaluate_samples(checkpoint: &Checkpoint, samples: &[Sample], split: &str, manifest_digest: &str) -> Result<EvalReport> {
    let model = checkpoint.model()?;
    let idx: Vec<usize> = (0..samples.len()).collect();
    let scores = predict_scores(&model, &checkpoint.params, samples, &idx)?;
    let summary = summarize(samples, &scores)?;
    let meta = &checkpoint.meta;
    Ok(EvalReport {
        split: split.to_owned(),
        train_method: meta.train_method,
        cross_method: BTreeMap::from([(meta.train_method, row(&summary))]),
        overall: summary.overall,
        per_method: summary.per_method,
        video_auc: summary.video_auc,
        videos: summary.videos,
        seeds: vec![meta.config.seed],
        config: meta.config.clone(),
        manifest_digest: manifest_digest.to_owned(),
        build_id: build_id(),
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_metrics(all: &[&Metrics]) -> Metrics {
    Metrics {
        accuracy: mean(all.iter().map(|m| m.accuracy)),
        auc: mean(all.iter().map(|m| m.auc)),
        fakes: all[0].fakes,
        reals: all[0].reals,
    }
}

/// Train-split, val-split and test-split samples of a dataset.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub manifest_digest: String,
}

impl Splits {
    pub fn load(dataset: &Dataset, parallel: bool) -> Result<Self> {
        let val = match dataset.manifest.splits.contains_key("val") {
            true => load_split(dataset, "val", parallel)?,
            false => Vec::new(),
        };
        Ok(Self {
            train: load_split(dataset, "train", parallel)?,
            val,
            test: load_split(dataset, "test", parallel)?,
            manifest_digest: dataset.manifest.digest(),
        })
    }
}

/// Trains on `train_method` once per seed and scores every method's test
/// fakes against the test reals. Cells and metrics are means over seeds.
pub fn cross_eval(
    config: &TrainConfig,
    splits: &Splits,
    train_method: Method,
    seeds: &[u64],
    mut progress: impl FnMut(u64, &EpochLog),
) -> Result<EvalReport> {
    if train_method == Method::None {
        return Err(TrainError::invalid("cross evaluation needs a fake method to train on"));
    }
    if seeds.is_empty() {
        return Err(TrainError::invalid("cross evaluation needs at least one seed"));
    }
    for m in Method::FAKES {
        if !splits.test.iter().any(|s| s.method == m) {
            return Err(TrainError::invalid(format!("test split has no samples of method {m}")));
        }
    }
    let method = TrainMethod::Only(train_method);
    let mut summaries = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..config.clone() };
        let outcome = train_on(&cfg, &splits.train, &splits.val, method, |log| progress(seed, log))?;
        let checkpoint = Checkpoint {
            params: outcome.params,
            meta: RunMeta {
                config: cfg,
                train_method: method,
                manifest_digest: splits.manifest_digest.clone(),
            },
        };
        let model = checkpoint.model()?;
        let idx: Vec<usize> = (0..splits.test.len()).collect();
        let scores = predict_scores(&model, &checkpoint.params, &splits.test, &idx)?;
        summaries.push(summarize(&splits.test, &scores)?);
    }
    let first = &summaries[0];
    let per_method: BTreeMap<Method, Metrics> = first
        .per_method
        .keys()
        .map(|m| {
            let all: Vec<&Metrics> = summaries.iter().map(|s| &s.per_method[m]).collect();
            (*m, mean_metrics(&all))
        })
        .collect();
    let cells = per_method
        .iter()
        .map(|(&m, x)| {
            let cell = CrossCell {
                auc: x.auc,
                per_seed: summaries.iter().map(|s| s.per_method[&m].auc).collect(),
                count: x.fakes + x.reals,
            };
            (m, cell)
        })
        .collect();
    let overall: Vec<&Metrics> = summaries.iter().map(|s| &s.overall).collect();
    Ok(EvalReport {
        split: "test".to_owned(),
        train_method: method,
        overall: mean_metrics(&overall),
        per_method,
        video_auc: mean(summaries.iter().map(|s| s.video_auc)),
        videos: first.videos,
        cross_method: BTreeMap::from([(method, cells)]),
        seeds: seeds.to_vec(),
        config: config.clone(),
        manifest_digest: splits.manifest_digest.clone(),
        build_id: build_id(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samples::tests::fake_samples;

    #[test]
    fn summary_of_perfect_scores() {
        use Method::*;
        let s = fake_samples(&[A, A, B, B, None, None, None, None]);
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1, 0.1, 0.3, 0.4];
        let sum = summarize(&s, &scores).unwrap();
        assert_eq!(sum.per_method[&A].auc, 1.0);
        assert_eq!(sum.per_method[&A].accuracy, 1.0);
        assert_eq!(sum.per_method[&B].auc, 0.75);
        assert_eq!(sum.per_method[&B].fakes, 2);
        assert_eq!(sum.per_method[&B].reals, 4);
        assert!(!sum.per_method.contains_key(&C));
        assert_eq!(sum.videos, 4);
        assert_eq!(sum.video_auc, 1.0);
    }

    #[test]
    fn mixed_videos_and_length_mismatch_are_errors() {
        use Method::*;
        let s = fake_samples(&[A, None]);
        assert!(summarize(&s, &[0.5, 0.5]).unwrap_err().to_string().contains("mixes"));
        assert!(summarize(&s, &[0.5]).is_err());
    }

    #[test]
    fn build_id_names_the_version() {
        assert!(build_id().starts_with(concat!("hff-", env!("CARGO_PKG_VERSION"))));
    }
}
