mod support;

use hff_core::entry::{entry_forward, rsa_map, Attention, EntryConfig, EntryOutput, Streams};
use hff_core::srm::SrmKernelBank;
use hff_core::{Bound, Graph, Initializer, ParamStore, Tensor};
use proptest::prelude::*;
use support::*;

fn small_config() -> EntryConfig {
    EntryConfig {
        widths: vec![4, 8, 8],
        ..EntryConfig::default()
    }
}

fn params(cfg: &EntryConfig, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    cfg.init_params(&mut Initializer::new(seed), &mut store).unwrap();
    store
}

struct Inputs {
    x: Tensor<f64>,
    x_h: Tensor<f64>,
}

fn inputs(seed: u64, batch: usize, size: usize) -> Inputs {
    let images = random_images(&mut rng(seed), batch, size);
    let x_h = SrmKernelBank::default().residual_image(&images).unwrap();
    Inputs {
        x: images.map(|v| v / 127.5 - 1.0),
        x_h,
    }
}

fn run(cfg: &EntryConfig, store: &ParamStore<f64>, inp: &Inputs) -> (Graph<f64>, Bound, EntryOutput) {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let (x, x_h) = (g.constant(inp.x.clone()), g.constant(inp.x_h.clone()));
    let out = entry_forward(&mut g, &bound, x, x_h, cfg, &SrmKernelBank::default(), Attention::Computed).unwrap();
    (g, bound, out)
}

#[test]
fn default_config_maps_64_pixels_to_8() {
    let cfg = EntryConfig::default();
    let (g, _, out) = run(&cfg, &params(&cfg, 0), &inputs(0, 2, 64));
    assert_eq!(g.shape(out.f.unwrap()), [2, 64, 8, 8]);
    assert_eq!(g.shape(out.f_h.unwrap()), [2, 64, 8, 8]);
    assert_eq!(g.shape(out.attention.unwrap()), [2, 1, 64, 64]);
    for key in ["entry.rgb.s1", "entry.hf_tilde.s2", "entry.hf_carry.s3", "entry.rgb_gated.s2"] {
        assert!(out.intermediates.contains_key(key), "{key}");
    }
    assert!(!out.intermediates.contains_key("entry.rgb_gated.s1"));
}

#[test]
fn attention_of_zero_residual_with_zero_conv_is_one_half() {
    let mut g = Graph::<f64>::new();
    let x_h = g.constant(Tensor::zeros(&[1, 9, 6, 6]));
    let w = g.constant(Tensor::zeros(&[1, 2, 7, 7]));
    let b = g.constant(Tensor::zeros(&[1]));
    let m = rsa_map(&mut g, x_h, w, b).unwrap();
    assert_eq!(g.shape(m), [1, 1, 6, 6]);
    assert!(g.value(m).data().iter().all(|&v| v == 0.5));
}

#[test]
fn attention_lies_strictly_inside_the_unit_interval() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let x_h = g.constant(uniform(&mut r, &[2, 9, 8, 8], -2.0, 2.0));
        let w = g.constant(uniform(&mut r, &[1, 2, 7, 7], -1.0, 1.0));
        let b = g.constant(uniform(&mut r, &[1], -1.0, 1.0));
        let m = rsa_map(&mut g, x_h, w, b).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0), "seed {seed}");
    }
}

#[test]
fn uniform_residual_gives_uniform_interior_attention() {
    let mut r = rng(4);
    let mut g = Graph::new();
    let x_h = g.constant(Tensor::from_fn(&[1, 9, 12, 12], |i| (i / 144) as f64 * 0.3 - 1.0));
    let w = g.constant(uniform(&mut r, &[1, 2, 3, 3], -1.0, 1.0));
    let b = g.constant(Tensor::scalar(0.2).reshape(&[1]).unwrap());
    let m = rsa_map(&mut g, x_h, w, b).unwrap();
    let mv = g.value(m);
    let centre = mv.at4(0, 0, 5, 5);
    for y in 1..11 {
        for x in 1..11 {
            assert!((mv.at4(0, 0, y, x) - centre).abs() <= 1e-15);
        }
    }
}

#[test]
fn attention_forced_to_one_equals_no_attention() {
    let with = small_config();
    let without = EntryConfig {
        rsa_scales: vec![],
        ..small_config()
    };
    let store = params(&with, 3);
    let inp = inputs(3, 2, 16);

    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let (x, x_h) = (g.constant(inp.x.clone()), g.constant(inp.x_h.clone()));
    let ones = g.constant(Tensor::full(&[2, 1, 16, 16], 1.0));
    let gated = entry_forward(&mut g, &bound, x, x_h, &with, &SrmKernelBank::default(), Attention::Fixed(ones)).unwrap();
    let (g2, _, plain) = run(&without, &store, &inp);

    assert_eq!(g.value(gated.f.unwrap()), g2.value(plain.f.unwrap()));
    assert_eq!(g.value(gated.f_h.unwrap()), g2.value(plain.f_h.unwrap()));
}

#[test]
fn zero_alignment_leaves_the_high_frequency_branch_alone() {
    let cfg = small_config();
    let mut store = params(&cfg, 5);
    for (name, t) in store.iter_mut() {
        if name.starts_with("entry.align.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let inp = inputs(5, 2, 16);
    let (g, _, both) = run(&cfg, &store, &inp);
    let hf_only = EntryConfig {
        streams: Streams::HighFrequency,
        ..small_config()
    };
    let (g2, _, alone) = run(&hf_only, &store, &inp);
    assert!(alone.f.is_none());
    assert_eq!(g.value(both.f_h.unwrap()), g2.value(alone.f_h.unwrap()));
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = small_config();
    let mut store = params(&cfg, 6);
    generic_point(&mut store, 6);
    let (mut g, bound, out) = run(&cfg, &store, &inputs(6, 2, 16));
    let both = g.concat(&[out.f.unwrap(), out.f_h.unwrap()], 1).unwrap();
    let loss = probe(&mut g, both).unwrap();
    let grads = g.backward(loss).unwrap();
    for (name, var) in bound.iter() {
        let grad = grads.get(var).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(grad.data().iter().any(|&v| v != 0.0), "{name} gradient is all zero");
    }
}

#[test]
fn same_seed_gives_identical_outputs() {
    let cfg = small_config();
    let inp = inputs(7, 2, 16);
    let (g1, _, a) = run(&cfg, &params(&cfg, 7), &inp);
    let (g2, _, b) = run(&cfg, &params(&cfg, 7), &inp);
    assert_eq!(g1.value(a.f.unwrap()), g2.value(b.f.unwrap()));
    assert_eq!(g1.value(a.f_h.unwrap()), g2.value(b.f_h.unwrap()));
    assert_eq!(g1.value(a.attention.unwrap()), g2.value(b.attention.unwrap()));
    let (g3, _, c) = run(&cfg, &params(&cfg, 8), &inp);
    assert_ne!(g1.value(a.f.unwrap()), g3.value(c.f.unwrap()));
}

#[test]
fn indivisible_extent_is_an_error() {
    let cfg = small_config();
    let store = params(&cfg, 0);
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let x = g.constant(Tensor::zeros(&[1, 3, 12, 12]));
    let x_h = g.constant(Tensor::zeros(&[1, 9, 12, 12]));
    let err = entry_forward(&mut g, &bound, x, x_h, &cfg, &SrmKernelBank::default(), Attention::Computed);
    assert!(err.is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        EntryConfig {
            widths: vec![],
            ..EntryConfig::default()
        },
        EntryConfig {
            widths: vec![4, 0],
            ..EntryConfig::default()
        },
        EntryConfig {
            rsa_scales: vec![4],
            ..EntryConfig::default()
        },
        EntryConfig {
            rsa_kernel: 4,
            ..EntryConfig::default()
        },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_extent_follows_the_scale_count(
        widths in prop::collection::vec(1usize..5, 1..4),
        multiple in 1usize..3,
        multiscale in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let scales = widths.len();
        let cfg = EntryConfig {
            rsa_scales: vec![scales],
            rsa_kernel: 3,
            multiscale,
            widths,
            ..EntryConfig::default()
        };
        let size = multiple << scales;
        let (g, _, out) = run(&cfg, &params(&cfg, seed), &inputs(seed, 1, size));
        let expected = [1, cfg.out_width(), multiple, multiple];
        prop_assert_eq!(g.shape(out.f.unwrap()), expected);
        prop_assert_eq!(g.shape(out.f_h.unwrap()), expected);
    }
}
