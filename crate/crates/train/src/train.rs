//! The training loop.

use hff_core::model::TwoStreamModel;
use hff_core::{adam_step, AdamState, Graph, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{TrainConfig, TrainMethod};
use crate::error::{Result, TrainError};
use crate::metrics::auc;
use crate::samples::{batch_tensor, eval_subset, has_both_classes, training_subset, Sample};

/// Batch size used for inference.
pub const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the last epoch reaching the best validation AUC, or
    /// from the last epoch when no validation set is available.
    pub params: ParamStore<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// Mean loss of the last epoch.
    pub final_loss: f64,
}

/// Fake probabilities for the selected samples.
pub fn predict_scores(model: &TwoStreamModel, params: &ParamStore<f32>, samples: &[Sample], idx: &[usize]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = batch_tensor(samples, chunk)?;
        scores.extend(model.predict(params, &x)?.p_fake);
    }
    Ok(scores)
}

fn val_auc(model: &TwoStreamModel, params: &ParamStore<f32>, val: &[Sample], idx: &[usize]) -> Result<Option<f64>> {
    if !has_both_classes(val, idx) {
        return Ok(None);
    }
    let scores = predict_scores(model, params, val, idx)?;
    let labels: Vec<u8> = idx.iter().map(|&i| val[i].label).collect();
    Ok(Some(auc(&scores, &labels)?))
}

/// Trains on `train[idx]`, scoring `val[val_idx]` after every epoch.
pub fn train(
    config: &TrainConfig,
    train: &[Sample],
    idx: &[usize],
    val: &[Sample],
    val_idx: &[usize],
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if !has_both_classes(train, idx) {
        return Err(TrainError::invalid("training set is degenerate: it needs both reals and fakes"));
    }
    let model = TwoStreamModel::new(config.model.clone())?;
    let mut params: ParamStore<f32> = model.init_params(config.seed)?;
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6261_7463_6865_7321);
    let mut order = idx.to_vec();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = batch_tensor(train, chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| usize::from(train[i].label)).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let out = model.forward(&mut g, &bound, &x)?;
            let loss = model.loss(&mut g, &out, &labels)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: value as f64,
                    samples: chunk.iter().map(|&i| train[i].id.clone()).collect(),
                });
            }
            let grads = g.backward(loss)?;
            params.store_grads(&bound, &grads)?;
            adam_step(&mut params, &mut adam, config.lr)?;
            total += value as f64;
            batches += 1;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: total / batches as f64,
            val_auc: val_auc(&model, &params, val, val_idx)?,
        };
        if let Some(v) = entry.val_auc {
            if best.as_ref().is_none_or(|(b, _, _)| v >= *b) {
                best = Some((v, epoch, params.clone()));
            }
        }
        progress(&entry);
        log.push(entry);
    }
    let final_loss = log.last().expect("at least one epoch").mean_loss;
    let (best_epoch, params) = match best {
        Some((_, epoch, p)) => (epoch, p),
        None => (config.epochs - 1, params),
    };
    Ok(TrainOutcome {
        params,
        best_epoch,
        log,
        final_loss,
    })
}

/// Selects the training and validation subsets for `method` and trains.
pub fn train_on(
    config: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    method: TrainMethod,
    progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let idx = training_subset(train_set, method, config.seed)?;
    let val_idx = eval_subset(val_set, method);
    train(config, train_set, &idx, val_set, &val_idx, progress)
}
