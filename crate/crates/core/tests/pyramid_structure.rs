use fpn::backbone::{Backbone, BackboneConfig, BottomUpFeatures};
use fpn::fpn::{LayerKind, PyramidBuilder, PyramidVariant};
use fpn::tensor::{grad_check, init_normal, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn features<T: fpn::Float>(rng: &mut ChaCha8Rng, channels: [usize; 4], size: usize, leaf: bool) -> BottomUpFeatures<T> {
    let mut make = |k: usize| {
        let c = channels[k - 2];
        let s = size >> k;
        let v = init_normal::<T>(&[1, c, s, s], 1.0, rng);
        if leaf {
            Tensor::leaf(v, &[1, c, s, s]).unwrap()
        } else {
            Tensor::from_vec(v, &[1, c, s, s]).unwrap()
        }
    };
    BottomUpFeatures {
        c2: make(2),
        c3: make(3),
        c4: make(4),
        c5: make(5),
    }
}

fn names_with(store: &ParamStore<f32>, needle: &str) -> usize {
    store
        .names()
        .iter()
        .filter(|n| n.contains(needle) && n.ends_with(".weight"))
        .count()
}

#[test]
fn strides_and_uniform_channels_on_a_backbone() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f32>::new();
    let backbone = Backbone::new(&mut store, &cfg, &mut rng).unwrap();
    let image = Tensor::<f32>::full(&[2, 3, 128, 96], 0.1).unwrap();
    let c = backbone.forward(&image).unwrap();
    for k in 2..=5 {
        let s = c.get(k).unwrap().shape().to_vec();
        assert_eq!(s, vec![2, cfg.stage_channels[k - 2], 128 >> k, 96 >> k]);
    }
    let pyr = PyramidBuilder::new(&mut store, "fpn", cfg.stage_channels, 40, PyramidVariant::FullFpn, true, &mut rng).unwrap();
    let p = pyr.forward(&c).unwrap();
    for (k, stride) in [(2, 4), (3, 8), (4, 16), (5, 32), (6, 64)] {
        assert_eq!(p.get(k).unwrap().shape(), &[2, 40, 128 / stride, 96 / stride], "P{k}");
    }
}

#[test]
fn backbone_parameter_count_formula() {
    // stem 3×3 from RGB, then per stage one block of two 3×3 convs plus a
    // 1×1 projection whenever the shape changes; every conv has a bias
    let cfg = BackboneConfig {
        stem_channels: 8,
        stage_channels: [8, 12, 16, 24],
        blocks_per_stage: [1, 1, 1, 1],
    };
    let mut store = ParamStore::<f32>::new();
    Backbone::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let mut want = conv(3, 8, 3);
    let mut cin = 8;
    for (i, &cout) in cfg.stage_channels.iter().enumerate() {
        want += conv(cin, cout, 3) + conv(cout, cout, 3);
        if i > 0 || cin != cout {
            want += conv(cin, cout, 1);
        }
        cin = cout;
    }
    let got: usize = store.iter().map(|p| p.tensor.numel()).sum();
    assert_eq!(got, want);
}

#[test]
fn variant_inventories() {
    let ch = [8, 12, 16, 24];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = features::<f32>(&mut rng, ch, 64, false);
    let build = |v: PyramidVariant| {
        let mut store = ParamStore::<f32>::new();
        let p = PyramidBuilder::new(&mut store, "fpn", ch, 8, v, true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (store, p)
    };

    let (s, p) = build(PyramidVariant::FullFpn);
    assert_eq!((names_with(&s, ".lateral."), names_with(&s, ".output.")), (4, 4));
    let out = p.forward(&c).unwrap();
    assert_eq!(out.upsample_ops, 3);
    assert_eq!(out.levels.keys().copied().collect::<Vec<_>>(), vec![2, 3, 4, 5, 6]);

    let (s, p) = build(PyramidVariant::TopDownNoLateral);
    assert_eq!(names_with(&s, ".lateral."), 1);
    assert!(s.get("fpn.lateral.5.weight").is_some());
    assert_eq!(p.forward(&c).unwrap().upsample_ops, 3);

    let (s, p) = build(PyramidVariant::BottomUpOnly);
    assert_eq!((names_with(&s, ".lateral."), names_with(&s, ".output.")), (4, 4));
    assert_eq!(p.forward(&c).unwrap().upsample_ops, 0);

    let (s, p) = build(PyramidVariant::FinestOnly);
    assert_eq!((names_with(&s, ".lateral."), names_with(&s, ".output.")), (4, 1));
    let out = p.forward(&c).unwrap();
    assert_eq!(out.levels.keys().copied().collect::<Vec<_>>(), vec![2]);

    // P6 is a pure subsample and registers nothing
    let mut with = ParamStore::<f32>::new();
    let mut without = ParamStore::<f32>::new();
    PyramidBuilder::new(
        &mut with,
        "fpn",
        ch,
        8,
        PyramidVariant::FullFpn,
        true,
        &mut ChaCha8Rng::seed_from_u64(4),
    )
    .unwrap();
    PyramidBuilder::new(
        &mut without,
        "fpn",
        ch,
        8,
        PyramidVariant::FullFpn,
        false,
        &mut ChaCha8Rng::seed_from_u64(4),
    )
    .unwrap();
    assert_eq!(with.names(), without.names());
}

#[test]
fn p6_is_subsampled_p5() {
    let ch = [4, 4, 4, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = features::<f64>(&mut rng, ch, 128, false);
    let mut store = ParamStore::new();
    let p = PyramidBuilder::new(&mut store, "fpn", ch, 4, PyramidVariant::FullFpn, true, &mut rng).unwrap();
    let out = p.forward(&c).unwrap();
    assert_eq!(
        out.get(6).unwrap().to_vec(),
        out.get(5).unwrap().max_subsample2x().unwrap().to_vec()
    );
}

#[test]
fn constant_top_down_adds_to_lateral() {
    // 1-channel pyramid: lateral(C5) is the constant 3, output convs are
    // identity taps, lateral(C4) is 2·C4 + 1; then P4 = 2·C4 + 1 + 3
    let ch = [1, 1, 1, 1];
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = PyramidBuilder::new(&mut store, "fpn", ch, 1, PyramidVariant::FullFpn, false, &mut rng).unwrap();
    let identity = [0., 0., 0., 0., 1., 0., 0., 0., 0.];
    for k in 2..=5 {
        p.set_layer(LayerKind::Output, k, &identity, &[0.]).unwrap();
    }
    p.set_layer(LayerKind::Lateral, 5, &[0.], &[3.]).unwrap();
    p.set_layer(LayerKind::Lateral, 4, &[2.], &[1.]).unwrap();
    let c = features::<f64>(&mut rng, ch, 128, false);
    let out = p.forward(&c).unwrap();
    let want: Vec<f64> = c.c4.to_vec().iter().map(|v| 2.0 * v + 4.0).collect();
    let got = out.get(4).unwrap().to_vec();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
    assert!(out.get(5).unwrap().to_vec().iter().all(|&v| v == 3.0));
}

#[test]
fn gradients_reach_the_expected_stages() {
    let ch = [4, 6, 8, 10];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = features::<f64>(&mut rng, ch, 64, true);
    let mut store = ParamStore::new();
    let p = PyramidBuilder::new(&mut store, "fpn", ch, 4, PyramidVariant::FullFpn, false, &mut rng).unwrap();
    let nonzero = |t: &Tensor<f64>| t.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0));

    p.forward(&c).unwrap().get(5).unwrap().sum().backward().unwrap();
    assert!(!nonzero(&c.c2) && !nonzero(&c.c3) && !nonzero(&c.c4));
    assert!(nonzero(&c.c5));

    for t in [&c.c2, &c.c3, &c.c4, &c.c5] {
        t.set_grad(None);
    }
    p.forward(&c).unwrap().get(2).unwrap().sum().backward().unwrap();
    assert!(nonzero(&c.c2) && nonzero(&c.c3) && nonzero(&c.c4) && nonzero(&c.c5));
}

#[test]
fn finite_differences_through_the_pyramid() {
    let ch = [3, 4, 5, 6];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = features::<f64>(&mut rng, ch, 64, true);
    let mut store = ParamStore::new();
    let p = PyramidBuilder::new(&mut store, "fpn", ch, 3, PyramidVariant::FullFpn, true, &mut rng).unwrap();
    let r: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.random_range(0.5..1.5)).collect();
    let r = Tensor::from_vec(r, &[1, 3, 16, 16]).unwrap();
    let c3 = c.c3.clone();
    let f = |x: &Tensor<f64>| {
        let feats = BottomUpFeatures {
            c2: c.c2.clone(),
            c3: x.clone(),
            c4: c.c4.clone(),
            c5: c.c5.clone(),
        };
        let out = p.forward(&feats)?;
        out.get(2)?.mul(&r)?.sum().add(&out.get(6)?.sum())
    };
    let err = grad_check(f, &c3, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_level_has_d_channels(c2 in 1usize..9, c3 in 1usize..9, c4 in 1usize..9, c5 in 1usize..9,
                                  d in 1usize..9, v in 0usize..4, seed in any::<u64>()) {
        let ch = [c2, c3, c4, c5];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = features::<f32>(&mut rng, ch, 64, false);
        let mut store = ParamStore::new();
        let variant = PyramidVariant::ALL[v];
        let p = PyramidBuilder::new(&mut store, "fpn", ch, d, variant, true, &mut rng).unwrap();
        let out = p.forward(&feats).unwrap();
        for (k, t) in &out.levels {
            prop_assert_eq!(t.shape(), &[1, d, 64 >> k, 64 >> k]);
        }
    }

    #[test]
    fn pyramid_is_linear_without_biases(alpha in 0.1f64..4.0, seed in any::<u64>()) {
        let ch = [3, 4, 5, 6];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = features::<f64>(&mut rng, ch, 64, false);
        let scaled = BottomUpFeatures {
            c2: feats.c2.scale(alpha),
            c3: feats.c3.scale(alpha),
            c4: feats.c4.scale(alpha),
            c5: feats.c5.scale(alpha),
        };
        let mut store = ParamStore::new();
        let p = PyramidBuilder::new(&mut store, "fpn", ch, 4, PyramidVariant::FullFpn, true, &mut rng).unwrap();
        let a = p.forward(&feats).unwrap();
        let b = p.forward(&scaled).unwrap();
        for k in 2..=6 {
            for (x, y) in a.get(k).unwrap().to_vec().iter().zip(b.get(k).unwrap().to_vec()) {
                prop_assert!((alpha * x - y).abs() < 1e-9 * (1.0 + y.abs()));
            }
        }
    }
}
