mod support;

use std::time::Instant;

use hff_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use hff_core::model::{fake_probability, fuse, video_level_predict, ModelConfig, TwoStreamModel, FAKE, REAL};
use hff_core::srm::SrmKernelBank;
use hff_core::{adam_step, AdamState, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use support::*;

fn am_loss(cosines: &[f64], labels: &[usize], s: f64, m: f64) -> f64 {
    let mut g = Graph::new();
    let c = g.constant(Tensor::new(&[labels.len(), 2], cosines.to_vec()).unwrap());
    let l = g.am_softmax_loss(c, labels, s, m).unwrap();
    g.value(l).item()
}

fn f32_images(seed: u64, batch: usize, size: usize) -> Tensor<f32> {
    random_images(&mut rng(seed), batch, size).cast()
}

#[test]
fn reduced_model_passes_gradient_check() {
    let start = Instant::now();
    for seed in 0..20 {
        let (report, names) = model_grad_check(seed).unwrap();
        assert!(
            report.max_rel_error <= 1e-5,
            "seed {seed}: {report:?} in {}",
            names[report.worst.0]
        );
    }
    eprintln!("reduced-model gradient check: {:.1?}", start.elapsed());
}

#[test]
fn outputs_are_bounded_and_probabilities_complementary() {
    let model = TwoStreamModel::new(ModelConfig::default()).unwrap();
    let params = model.init_params::<f32>(1).unwrap();
    let pred = model.predict(&params, &f32_images(1, 4, 64)).unwrap();
    assert_eq!(pred.cosines.shape(), [4, 2]);
    assert!(pred.cosines.data().iter().all(|c| (-1.0..=1.0).contains(c)));
    let swapped = Tensor::from_fn(&[4, 2], |i| pred.cosines.data()[i ^ 1]);
    let p_real = fake_probability(&swapped, model.config().loss_s);
    for (pf, pr) in pred.p_fake.iter().zip(p_real) {
        assert!(*pf > 0.0 && *pf < 1.0);
        assert!((pf + pr - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn duplicated_rows_give_identical_outputs() {
    let model = TwoStreamModel::new(ModelConfig::default()).unwrap();
    let params = model.init_params::<f32>(2).unwrap();
    let one = f32_images(2, 1, 64);
    let other = f32_images(3, 1, 64);
    let batch = Tensor::cat_batch(&[&one, &other, &one]).unwrap();
    let pred = model.predict(&params, &batch).unwrap();
    let rows: Vec<&[f32]> = pred.cosines.data().chunks(2).collect();
    assert_eq!(rows[0], rows[2]);
    assert_ne!(rows[0], rows[1]);
    assert_eq!(pred.p_fake[0], pred.p_fake[2]);
    let alone = model.predict(&params, &one).unwrap();
    assert_eq!(alone.cosines.data(), rows[0]);
}

#[test]
fn same_seed_and_input_give_identical_outputs() {
    let model = TwoStreamModel::new(ModelConfig::default()).unwrap();
    let images = f32_images(4, 2, 64);
    let a = model.predict(&model.init_params::<f32>(9).unwrap(), &images).unwrap();
    let b = model.predict(&model.init_params::<f32>(9).unwrap(), &images).unwrap();
    assert_eq!(a, b);
}

#[test]
fn wrong_input_size_is_an_error() {
    let model = TwoStreamModel::new(reduced_config()).unwrap();
    let params = model.init_params::<f64>(0).unwrap();
    assert!(model.predict(&params, &Tensor::zeros(&[1, 3, 32, 32])).is_err());
    assert!(model.predict(&params, &Tensor::zeros(&[1, 1, 16, 16])).is_err());
    assert!(model.predict(&params, &Tensor::zeros(&[1, 3, 16, 16])).is_ok());
}

#[test]
fn invalid_model_configs_are_rejected() {
    let bad = [
        ModelConfig {
            input_size: 60,
            ..ModelConfig::default()
        },
        ModelConfig {
            dcma_placements: vec![3],
            ..ModelConfig::default()
        },
        ModelConfig {
            dcma_reduction: 3,
            ..ModelConfig::default()
        },
        ModelConfig {
            loss_m: 1.0,
            ..ModelConfig::default()
        },
        ModelConfig {
            loss_s: 0.0,
            ..ModelConfig::default()
        },
        ModelConfig {
            srm_clip: -1.0,
            ..ModelConfig::default()
        },
    ];
    for cfg in bad {
        assert!(TwoStreamModel::new(cfg.clone()).is_err(), "{cfg:?}");
    }
}

#[test]
fn parameter_names_are_hierarchical_and_unique() {
    let model = TwoStreamModel::new(ModelConfig::default()).unwrap();
    let params = model.init_params::<f32>(0).unwrap();
    let names: Vec<&str> = params.names().collect();
    let mut sorted = names.clone();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert!(names.iter().all(|n| n.contains('.')));
    for prefix in ["entry.rsa.", "dcma0.", "dcma1.", "middle.rgb.1.", "middle.hf.1.", "exit.hf.", "fusion.fc2."] {
        assert!(names.iter().any(|n| n.starts_with(prefix)), "{prefix}");
    }
    assert_eq!(params.get("classifier.weight").unwrap().shape(), [2, 128]);
    assert!(!names.iter().any(|n| n.contains("srm")));
}

#[test]
fn fusion_with_zero_maps_halves_the_features() {
    let mut store = ParamStore::<f64>::new();
    store.insert("fusion.fc1.weight", Tensor::zeros(&[2, 8])).unwrap();
    store.insert("fusion.fc1.bias", Tensor::zeros(&[2])).unwrap();
    store.insert("fusion.fc2.weight", Tensor::zeros(&[8, 2])).unwrap();
    store.insert("fusion.fc2.bias", Tensor::zeros(&[8])).unwrap();
    let mut r = rng(5);
    let a = uniform(&mut r, &[3, 4, 1, 1], -2.0, 2.0);
    let b = uniform(&mut r, &[3, 4, 1, 1], -2.0, 2.0);

    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = fuse(&mut g, &bound, &[av, bv]).unwrap();
    assert_eq!(g.shape(out), [3, 8]);
    for row in 0..3 {
        for c in 0..8 {
            let z = if c < 4 { a.data()[row * 4 + c] } else { b.data()[row * 4 + c - 4] };
            assert_eq!(g.value(out).data()[row * 8 + c], 0.5 * z);
        }
    }

    let zero = g.constant(Tensor::zeros(&[3, 4, 1, 1]));
    let out = fuse(&mut g, &bound, &[zero, zero]).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));

    // A saturated gate passes the features through unchanged.
    store.get_mut("fusion.fc2.bias").unwrap().data_mut().fill(1000.0);
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = fuse(&mut g, &bound, &[av, bv]).unwrap();
    assert_eq!(&g.value(out).data()[..4], &a.data()[..4]);
    assert_eq!(&g.value(out).data()[4..8], &b.data()[..4]);

    let narrow = g.constant(Tensor::zeros(&[3, 2, 1, 1]));
    assert!(fuse(&mut g, &bound, &[av, narrow]).is_err());
}

#[test]
fn margin_free_unit_scale_loss_is_cross_entropy() {
    let mut r = rng(6);
    let cos = uniform(&mut r, &[1000, 2], -1.0, 1.0);
    let labels: Vec<usize> = (0..1000).map(|i| (i * 7 + 3) % 2).collect();
    let expected = cos
        .data()
        .chunks(2)
        .zip(&labels)
        .map(|(row, &y)| {
            let lse = (row[0].exp() + row[1].exp()).ln();
            lse - row[y]
        })
        .sum::<f64>()
        / 1000.0;
    assert!((am_loss(cos.data(), &labels, 1.0, 0.0) - expected).abs() <= 1e-6);
}

#[test]
fn confident_sample_loss_matches_closed_form() {
    let loss = am_loss(&[0.1, 0.9], &[FAKE], 30.0, 0.35);
    let expected = (-13.5f64).exp().ln_1p();
    assert!((loss - expected).abs() <= 1e-9);
    assert!((loss - 1.371e-6).abs() <= 1e-9);
}

#[test]
fn equal_cosines_without_margin_give_log_two() {
    for s in [0.5, 1.0, 30.0, 64.0] {
        for c in [-0.7, 0.0, 0.3] {
            let loss = am_loss(&[c, c], &[REAL], s, 0.0);
            assert!((loss - std::f64::consts::LN_2).abs() <= 1e-12, "s={s} c={c}");
        }
    }
}

#[test]
fn loss_decreases_as_the_true_cosine_grows() {
    let grid: Vec<f64> = (0..=40).map(|i| -1.0 + i as f64 * 0.05).collect();
    for &other in &[-0.5, 0.0, 0.6] {
        let losses: Vec<f64> = grid.iter().map(|&c| am_loss(&[c, other], &[REAL], 30.0, 0.35)).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "other={other}");
    }
}

#[test]
fn invalid_labels_are_rejected() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::<f64>::zeros(&[2, 2]));
    assert!(g.am_softmax_loss(c, &[0, 2], 30.0, 0.35).is_err());
    assert!(g.am_softmax_loss(c, &[0], 30.0, 0.35).is_err());
}

#[test]
fn predictions_do_not_depend_on_the_margin() {
    let images = random_images(&mut rng(7), 3, 16);
    let base = TwoStreamModel::new(reduced_config()).unwrap();
    let params = base.init_params::<f64>(7).unwrap();
    let reference = base.predict(&params, &images).unwrap();
    for m in [0.0, 0.1, 0.9] {
        let model = TwoStreamModel::new(ModelConfig {
            loss_m: m,
            ..reduced_config()
        })
        .unwrap();
        assert_eq!(model.predict(&params, &images).unwrap(), reference);
    }
}

fn batch_loss(model: &TwoStreamModel, params: &mut ParamStore<f32>, images: &Tensor<f32>, labels: &[usize], grads: bool) -> f32 {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = model.forward(&mut g, &bound, images).unwrap();
    let loss = model.loss(&mut g, &out, labels).unwrap();
    if grads {
        let grads = g.backward(loss).unwrap();
        params.store_grads(&bound, &grads).unwrap();
    }
    g.value(loss).item()
}

#[test]
fn one_adam_step_decreases_the_batch_loss() {
    let model = TwoStreamModel::new(ModelConfig::default()).unwrap();
    let labels = [REAL, FAKE, FAKE, REAL];
    for seed in 0..5 {
        let mut params = model.init_params::<f32>(seed).unwrap();
        let images = f32_images(seed + 50, 4, 64);
        let before = batch_loss(&model, &mut params, &images, &labels, true);
        adam_step(&mut params, &mut AdamState::default(), 1e-4).unwrap();
        let after = batch_loss(&model, &mut params, &images, &labels, false);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn training_leaves_the_srm_bank_untouched() {
    let model = TwoStreamModel::new(reduced_config()).unwrap();
    let before = model.bank().kernels::<f32>();
    let mut params = model.init_params::<f32>(3).unwrap();
    let mut state = AdamState::default();
    let images = f32_images(3, 2, 16);
    for _ in 0..5 {
        batch_loss(&model, &mut params, &images, &[REAL, FAKE], true);
        adam_step(&mut params, &mut state, 1e-2).unwrap();
    }
    assert_eq!(model.bank().kernels::<f32>(), before);
    assert_eq!(*model.bank(), SrmKernelBank::default());
}

#[test]
fn checkpoint_round_trip_gives_identical_predictions() {
    let model = TwoStreamModel::new(ModelConfig::default()).unwrap();
    let params = model.init_params::<f32>(11).unwrap();
    let config = serde_json::to_string(model.config()).unwrap();
    let bytes = encode_checkpoint(&params, &config);
    let (loaded, echo) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(loaded, params);
    let restored: ModelConfig = serde_json::from_str(&echo).unwrap();
    assert_eq!(&restored, model.config());
    let images = f32_images(11, 2, 64);
    let a = model.predict(&params, &images).unwrap();
    let b = TwoStreamModel::new(restored).unwrap().predict(&loaded, &images).unwrap();
    assert_eq!(a, b);
    assert_eq!(encode_checkpoint(&loaded, &echo), bytes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn video_score_is_order_independent(mut probs in prop::collection::vec(0.0f64..=1.0, 1..20), seed in any::<u64>()) {
        let before = video_level_predict(&probs).unwrap();
        use rand::seq::SliceRandom;
        probs.shuffle(&mut rng(seed));
        let after = video_level_predict(&probs).unwrap();
        prop_assert!((before - after).abs() <= 1e-12);
    }
}
