mod common;

use common::*;
use hff_core::checkpoint::encode_checkpoint;
use hff_core::model::TwoStreamModel;
use hff_data::io::images_to_tensor;
use hff_data::Method;
use hff_train::eval::{evaluate, evaluate_samples, summarize, Checkpoint, RunMeta, Splits};
use hff_train::gradcam::{gradcam, layer_names};
use hff_train::samples::load_split;
use hff_train::{auc, cross_eval, train_on, TrainError, TrainMethod};
use proptest::prelude::*;

fn checkpoint(params: hff_core::ParamStore<f32>, config: hff_train::TrainConfig) -> Checkpoint {
    Checkpoint {
        params,
        meta: RunMeta {
            config,
            train_method: TrainMethod::All,
            manifest_digest: "test".into(),
        },
    }
}

#[test]
fn seeded_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 1);
    let train = load_split(&ds, "train", false).unwrap();
    assert_eq!(train.len(), 16);
    let cfg = tiny_config();
    let a = train_on(&cfg, &train, &[], TrainMethod::All, |_| {}).unwrap();
    let b = train_on(&cfg, &train, &[], TrainMethod::All, |_| {}).unwrap();
    assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
    assert_eq!(encode_checkpoint(&a.params, ""), encode_checkpoint(&b.params, ""));
    let other = hff_train::TrainConfig { seed: 6, ..cfg };
    let c = train_on(&other, &train, &[], TrainMethod::All, |_| {}).unwrap();
    assert_ne!(a.final_loss, c.final_loss);
}

#[test]
fn parallel_loading_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 2);
    let serial = load_split(&ds, "train", false).unwrap();
    let parallel = load_split(&ds, "train", true).unwrap();
    assert_eq!(serial, parallel);
}

#[test]
fn degenerate_training_sets_are_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 3);
    let reals: Vec<_> = load_split(&ds, "train", false).unwrap().into_iter().filter(|s| s.label == 0).collect();
    let mut epochs = 0;
    let err = train_on(&tiny_config(), &reals, &[], TrainMethod::All, |_| epochs += 1).unwrap_err();
    assert!(err.to_string().contains("degenerate"), "{err}");
    assert_eq!(epochs, 0);
}

#[test]
fn non_finite_loss_names_the_batch_samples() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 4);
    let train = load_split(&ds, "train", false).unwrap();
    let mut cfg = tiny_config();
    // Overflows to infinity in 32-bit arithmetic.
    cfg.model.loss_s = 1e300;
    match train_on(&cfg, &train, &[], TrainMethod::All, |_| {}).unwrap_err() {
        TrainError::NonFiniteLoss { epoch, batch, samples, .. } => {
            assert_eq!((epoch, batch), (0, 0));
            assert_eq!(samples.len(), cfg.batch_size);
            assert!(samples.iter().all(|s| s.starts_with("train/")));
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn validation_picks_the_checkpoint_and_logs_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 5);
    let splits = Splits::load(&ds, false).unwrap();
    let cfg = hff_train::TrainConfig { epochs: 3, ..tiny_config() };
    let mut seen = Vec::new();
    let out = train_on(&cfg, &splits.train, &splits.val, TrainMethod::All, |l| seen.push(l.clone())).unwrap();
    assert_eq!(seen, out.log);
    assert_eq!(out.log.len(), 3);
    assert!(out.log.iter().all(|l| l.val_auc.is_some_and(|v| (0.0..=1.0).contains(&v))));
    let best = out.log.iter().map(|l| l.val_auc.unwrap()).fold(f64::MIN, f64::max);
    assert_eq!(out.log[out.best_epoch].val_auc, Some(best));
    assert_eq!(out.final_loss, out.log[2].mean_loss);
}

#[test]
fn checkpoints_round_trip_and_reports_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 6);
    let splits = Splits::load(&ds, false).unwrap();
    let cfg = tiny_config();
    let out = train_on(&cfg, &splits.train, &[], TrainMethod::All, |_| {}).unwrap();
    let ck = checkpoint(out.params, cfg.clone());
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.meta, ck.meta);

    let model = ck.model().unwrap();
    let x = images_to_tensor(&splits.test.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    let before = model.predict(&ck.params, &x).unwrap();
    let after = loaded.model().unwrap().predict(&loaded.params, &x).unwrap();
    assert_eq!(before, after);

    let report = evaluate(&loaded, &ds, "test").unwrap();
    assert_eq!(report.per_method.len(), 4);
    assert_eq!(report.config, cfg);
    assert_eq!(report.manifest_digest, ds.manifest.digest());
    for m in report.per_method.values() {
        assert!((0.0..=1.0).contains(&m.auc) && (0.0..=1.0).contains(&m.accuracy));
        assert_eq!((m.fakes, m.reals), (1, 4));
    }
    let row = &report.cross_method[&TrainMethod::All];
    assert!(row.values().all(|c| c.count >= 1));
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert!(json["per_method"]["A"]["auc"].is_f64());
    assert!(json["build_id"].as_str().unwrap().starts_with("hff-"));

    // Duplicating every sample leaves every rate unchanged.
    let doubled: Vec<_> = splits.test.iter().chain(&splits.test).cloned().collect();
    let twice = evaluate_samples(&loaded, &doubled, "test", "x").unwrap();
    assert_eq!(twice.overall.auc, report.overall.auc);
    assert_eq!(twice.overall.accuracy, report.overall.accuracy);
    assert_eq!(twice.video_auc, report.video_auc);
    for (m, v) in &report.per_method {
        assert_eq!(twice.per_method[m].auc, v.auc);
    }
}

#[test]
fn missing_files_are_reported_with_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 7);
    let victim = ds.split("test").unwrap()[2].path.clone();
    std::fs::remove_file(dir.path().join(&victim)).unwrap();
    let cfg = tiny_config();
    let model = TwoStreamModel::new(cfg.model.clone()).unwrap();
    let ck = checkpoint(model.init_params(0).unwrap(), cfg);
    let err = evaluate(&ck, &ds, "test").unwrap_err();
    assert!(err.is_io());
    assert!(err.to_string().contains(&victim), "{err}");
    assert!(evaluate(&ck, &ds, "holdout").is_err());
    let err = Checkpoint::load(&dir.path().join("none.ckpt")).unwrap_err();
    assert!(err.is_io() && err.to_string().contains("none.ckpt"));
}

#[test]
fn cross_eval_reports_one_row_of_four_cells_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 8);
    let splits = Splits::load(&ds, false).unwrap();
    let cfg = tiny_config();
    let a = cross_eval(&cfg, &splits, Method::B, &[1, 2], |_, _| {}).unwrap();
    let b = cross_eval(&cfg, &splits, Method::B, &[1, 2], |_, _| {}).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.cross_method.len(), 1);
    let row = &a.cross_method[&TrainMethod::Only(Method::B)];
    assert_eq!(row.keys().copied().collect::<Vec<_>>(), Method::FAKES);
    for cell in row.values() {
        assert_eq!(cell.per_seed.len(), 2);
        assert_eq!(cell.count, 5);
        assert!((cell.auc - (cell.per_seed[0] + cell.per_seed[1]) / 2.0).abs() < 1e-15);
    }
    assert_eq!(a.seeds, [1, 2]);
    assert!(cross_eval(&cfg, &splits, Method::None, &[1], |_, _| {}).is_err());
    assert!(cross_eval(&cfg, &splits, Method::A, &[], |_, _| {}).is_err());
    let mut no_d = splits.clone();
    no_d.test.retain(|s| s.method != Method::D);
    assert!(cross_eval(&cfg, &no_d, Method::A, &[1], |_, _| {}).is_err());
}

#[test]
fn gradcam_maps_are_normalized_and_layers_are_checked() {
    let cfg = tiny_config();
    let model = TwoStreamModel::new(cfg.model.clone()).unwrap();
    let params = model.init_params::<f32>(3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 9);
    let img = ds.image(&ds.split("train").unwrap()[0]).unwrap();
    let x = images_to_tensor(&[&img]).unwrap();
    let names = layer_names(&model, &params).unwrap();
    for layer in ["entry.attention", "exit.hf", "dcma1.rgb", "middle.rgb.0"] {
        assert!(names.iter().any(|n| n == layer), "{layer} missing from {names:?}");
    }
    for layer in &names {
        let map = gradcam(&model, &params, &x, layer).unwrap();
        assert_eq!((map.width, map.height), (SIZE, SIZE));
        assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)), "{layer}");
        let max = map.values.iter().copied().fold(0.0, f64::max);
        assert!(max == 1.0 || max == 0.0, "{layer}: max {max}");
    }
    let err = gradcam(&model, &params, &x, "nope").unwrap_err().to_string();
    assert!(err.contains("nope") && err.contains("exit.rgb"), "{err}");
    let batch = images_to_tensor(&[&img, &img]).unwrap();
    assert!(gradcam(&model, &params, &batch, "exit.hf").is_err());
}

#[test]
fn dead_exit_layers_give_all_zero_heatmaps() {
    let cfg = tiny_config();
    let model = TwoStreamModel::new(cfg.model.clone()).unwrap();
    let mut params = model.init_params::<f32>(4).unwrap();
    for (name, t) in params.iter_mut() {
        if name.starts_with("exit.") {
            let fill = if name.ends_with(".bias") { -1.0 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|v| *v = fill);
        }
    }
    let x = hff_core::Tensor::full(&[1, 3, SIZE, SIZE], 100.0f32);
    for layer in ["middle.hf.1", "dcma0.rgb", "exit.hf"] {
        let map = gradcam(&model, &params, &x, layer).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0), "{layer}");
    }
}

fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=50).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..8).prop_map(|v| v as f64 / 8.0), n),
            prop::collection::vec(0u8..=1, n),
        )
    })
}

proptest! {
    #[test]
    fn auc_equals_pair_enumeration((scores, labels) in scored()) {
        let pos = labels.iter().filter(|&&l| l == 1).count();
        prop_assume!(pos > 0 && pos < labels.len());
        prop_assert_eq!(auc(&scores, &labels).unwrap(), brute_force_auc(&scores, &labels));
    }

    #[test]
    fn auc_is_invariant_to_increasing_maps((scores, labels) in scored(), k in 0.1f64..5.0) {
        let pos = labels.iter().filter(|&&l| l == 1).count();
        prop_assume!(pos > 0 && pos < labels.len());
        let mapped: Vec<f64> = scores.iter().map(|s| (k * s).exp() - 3.0).collect();
        prop_assert_eq!(auc(&mapped, &labels).unwrap(), auc(&scores, &labels).unwrap());
    }
}

#[test]
fn summaries_need_both_classes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 10);
    let test = load_split(&ds, "test", false).unwrap();
    let fakes: Vec<_> = test.iter().filter(|s| s.label == 1).cloned().collect();
    assert!(summarize(&fakes, &vec![0.5; fakes.len()]).is_err());
}

#[test]
fn flat_activations_are_not_gradcam_layers() {
    let cfg = tiny_config();
    let model = TwoStreamModel::new(cfg.model.clone()).unwrap();
    let params = model.init_params::<f32>(3).unwrap();
    let names = layer_names(&model, &params).unwrap();
    assert!(!names.iter().any(|n| n == "embedding" || n == "fused"));
    let x = hff_core::Tensor::full(&[1, 3, SIZE, SIZE], 10.0f32);
    assert!(gradcam(&model, &params, &x, "embedding").unwrap_err().to_string().contains("unknown layer"));
}
