use super::*;
use mafnet_autograd::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        generator: GeneratorConfig {
            base_width: 4,
            num_patches: 8,
            disc_width: 4,
            head_hidden: 16,
            embed_dim: EMBED_DIM,
            ..GeneratorConfig::desk_scale()
        },
        unet: UNetConfig {
            base_width: 4,
            depth: 2,
            ..UNetConfig::desk_scale()
        },
    }
}

fn model() -> (Mafnet, ParamStore) {
    let m = Mafnet::new(tiny_config()).unwrap();
    let p = m.init_params(11);
    (m, p)
}

fn ramp(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn config_validation() {
    assert!(GeneratorConfig::full_scale().validate().is_ok());
    let mut c = GeneratorConfig::desk_scale();
    c.nce_layers = vec![0, 8, 4];
    assert!(c.validate().is_err());
    c.nce_layers = vec![0, 4, 19];
    assert!(c.validate().is_err());
    c.nce_layers = vec![0, 4, 18];
    assert!(c.validate().is_ok());
    c.n_modalities = 2;
    assert!(c.validate().is_err());
    let mut u = UNetConfig::desk_scale();
    u.in_channels = 3;
    assert!(u.validate().is_err());
}

#[test]
fn parameter_keys_follow_component_schema() {
    let (_, p) = model();
    for name in p.names() {
        let top = name.split('/').next().unwrap();
        assert!(["gen", "head", "disc", "seg"].contains(&top), "{name}");
        assert!(name.ends_with("/weight") || name.ends_with("/bias"), "{name}");
    }
    assert!(p.contains("gen/maf/attention/weight"));
    assert!(p.contains("head/enc2/layer16/fc2/bias"));
}

#[test]
fn encoder_zero_input_is_finite_and_taps_layer_zero() {
    let (m, p) = model();
    let g = Graph::with_params(&p);
    let x = g.constant(Tensor::zeros(vec![1, 1, 32, 32]));
    let pyr = m.encode(&g, x, 0).unwrap();
    assert!(pyr.bottleneck.value().all_finite());
    assert_eq!(pyr.taps.len(), 5);
    assert_eq!(pyr.tap(0).unwrap().id(), x.id());
    for (layer, v) in &pyr.taps {
        assert!(v.value().all_finite(), "layer {layer}");
    }
}

#[test]
fn encoders_have_separate_weights() {
    let (m, p) = model();
    let g = Graph::with_params(&p);
    let x = g.constant(ramp(vec![1, 1, 16, 16], 1));
    let a = m.encode(&g, x, 0).unwrap().bottleneck.value();
    let b = m.encode(&g, x, 1).unwrap().bottleneck.value();
    assert_ne!(*a, *b);
}

#[test]
fn bottleneck_of_224_input_is_56() {
    let (m, p) = model();
    let g = Graph::with_params(&p);
    let x = g.constant(Tensor::zeros(vec![1, 1, 224, 224]));
    let pyr = m.encode(&g, x, 2).unwrap();
    assert_eq!(pyr.bottleneck.shape(), vec![1, 16, 56, 56]);
    let y = m.decode(&g, pyr.bottleneck).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 224, 224]);
}

#[test]
fn encode_rejects_bad_shapes() {
    let (m, p) = model();
    let g = Graph::with_params(&p);
    let x = g.constant(Tensor::zeros(vec![1, 2, 16, 16]));
    assert!(matches!(m.encode(&g, x, 0), Err(ModelError::ShapeMismatch { .. })));
    let x = g.constant(Tensor::zeros(vec![1, 1, 18, 16]));
    assert!(matches!(m.encode(&g, x, 0), Err(ModelError::ShapeMismatch { .. })));
}

#[test]
fn equal_attention_logits_give_one_third() {
    let (m, mut p) = model();
    for (name, t) in p.iter_mut() {
        if name.starts_with("gen/maf/attention/") {
            t.data_mut().fill(0.0);
        }
    }
    let g = Graph::with_params(&p);
    let f: Vec<_> = (0..3).map(|i| g.constant(ramp(vec![2, 16, 4, 4], i))).collect();
    let fused = m.maf_fuse(&g, &f).unwrap();
    assert!(fused.attention.value().data().iter().all(|&a| a == 1.0 / 3.0));
}

#[test]
fn attention_sums_to_one() {
    let (m, p) = model();
    let g = Graph::with_params(&p);
    let f: Vec<_> = (0..3).map(|i| g.constant(ramp(vec![2, 16, 4, 4], 10 + i).map(|v| 40.0 * v))).collect();
    let a = m.maf_fuse(&g, &f).unwrap().attention.value();
    let (b, n, h, w) = a.nchw();
    for bi in 0..b {
        for i in 0..h * w {
            let s: f64 = (0..n).map(|c| a.data()[(bi * n + c) * h * w + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn fusion_with_zero_partners_depends_only_on_first_modality() {
    let (m, mut p) = model();
    let c = 16;
    // 1×1 fuse conv: identity on the first modality's channels, zero elsewhere.
    let fuse = p.get_mut("gen/maf/fuse/weight").unwrap();
    fuse.data_mut().fill(0.0);
    for i in 0..c {
        fuse.data_mut()[i * 3 * c + i] = 1.0;
    }
    let g = Graph::with_params(&p);
    let f1 = ramp(vec![1, c, 3, 3], 5);
    let zeros = Tensor::zeros(vec![1, c, 3, 3]);
    let vars = [g.constant(f1.clone()), g.constant(zeros.clone()), g.constant(zeros)];
    let out = m.maf_fuse(&g, &vars).unwrap();
    let a = out.attention.value();
    let fused = out.features.value();
    for ch in 0..c {
        for i in 0..9 {
            let v = a.data()[i] * f1.data()[ch * 9 + i];
            let expected = if v > 0.0 { v } else { 0.2 * v };
            assert!((fused.data()[ch * 9 + i] - expected).abs() < 1e-14);
        }
    }
}

#[test]
fn decoder_output_is_bounded_and_deterministic() {
    let (m, p) = model();
    let run = || {
        let g = Graph::with_params(&p);
        let f = g.constant(ramp(vec![1, 16, 4, 4], 3).map(|v| 500.0 * v));
        (*m.decode(&g, f).unwrap().value()).clone()
    };
    let y = run();
    assert_eq!(y.shape(), &[1, 1, 16, 16]);
    assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(y, run());
}

#[test]
fn synthesis_is_modality_specific() {
    let (m, p) = model();
    let x = ramp(vec![1, 3, 16, 16], 4);
    let mut swapped = x.clone();
    let plane = 16 * 16;
    let (a, b) = swapped.data_mut().split_at_mut(plane);
    a.swap_with_slice(&mut b[..plane]);
    let run = |t: Tensor| {
        let g = Graph::with_params(&p);
        let s = m.synthesize(&g, g.constant(t)).unwrap();
        assert_eq!(s.attention.shape(), vec![1, 3, 4, 4]);
        (*s.image.value()).clone()
    };
    let y = run(x);
    assert!(y.all_finite());
    assert_ne!(y, run(swapped));
}

#[test]
fn discriminator_contract() {
    let (m, mut p) = model();
    let g = Graph::with_params(&p);
    for v in [1.0, -1.0] {
        let img = g.constant(Tensor::full(vec![1, 1, 32, 32], v));
        let logits = m.discriminate(&g, img).unwrap();
        assert!(logits.value().all_finite());
    }
    let img = g.constant(Tensor::zeros(vec![1, 1, 224, 224]));
    let shape = m.discriminate(&g, img).unwrap().shape();
    assert_eq!(shape, vec![1, 1, 26, 26]);
    let small = g.constant(Tensor::zeros(vec![1, 1, 16, 16]));
    assert!(matches!(m.discriminate(&g, small), Err(ModelError::ShapeMismatch { .. })));

    for (name, t) in p.iter_mut() {
        if name.starts_with("disc/") {
            t.data_mut().fill(0.0);
        }
    }
    let g = Graph::with_params(&p);
    let img = g.constant(ramp(vec![1, 1, 32, 32], 9));
    let logits = m.discriminate(&g, img).unwrap().value();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn patch_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut all = sample_patch_positions((4, 5), 20, &mut rng).unwrap();
    all.sort_unstable();
    assert_eq!(all, (0..20).collect::<Vec<_>>());
    let a = sample_patch_positions((8, 8), 16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = sample_patch_positions((8, 8), 16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        sample_patch_positions((2, 2), 5, &mut rng),
        Err(ModelError::TooManyPatches {
            requested: 5,
            available: 4
        })
    );
}

proptest! {
    #[test]
    fn patch_positions_are_distinct(seed in 0u64..1000, h in 1usize..12, w in 1usize..12, frac in 0.0f64..=1.0) {
        let n = ((h * w) as f64 * frac) as usize;
        let pos = sample_patch_positions((h, w), n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut sorted = pos.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), n);
        prop_assert!(pos.iter().all(|&p| p < h * w));
    }
}

#[test]
fn projections_are_unit_norm_256_dim_for_every_layer() {
    let (m, p) = model();
    let g = Graph::with_params(&p);
    let x = g.constant(ramp(vec![2, 1, 32, 32], 6));
    let pyr = m.encode(&g, x, 1).unwrap();
    for (i, (layer, feat)) in pyr.taps.iter().enumerate() {
        let s = feat.shape();
        let pos = sample_patch_positions((s[2], s[3]), 8, &mut ChaCha8Rng::seed_from_u64(*layer as u64)).unwrap();
        let z = m.project(&g, 1, i, *feat, &pos).unwrap().value();
        assert_eq!(z.shape(), &[16, 256], "layer {layer}");
        for row in z.data().chunks(256) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn identical_features_project_identically() {
    let (m, p) = model();
    let g = Graph::with_params(&p);
    let feat = g.constant(Tensor::full(vec![1, 8, 4, 4], 0.7));
    let z = m.project(&g, 0, 1, feat, &[3, 9]).unwrap().value();
    assert_eq!(z.data()[..256], z.data()[256..]);
}

#[test]
fn unet_shapes_and_classes() {
    let (m, p) = model();
    let g = Graph::with_params(&p);
    let x = g.constant(ramp(vec![2, 4, 16, 16], 8));
    let logits = m.unet_forward(&g, x).unwrap().value();
    assert_eq!(logits.shape(), &[2, 4, 16, 16]);
    assert!(logits.all_finite());
    let bad = g.constant(Tensor::zeros(vec![1, 3, 16, 16]));
    assert!(m.unet_forward(&g, bad).is_err());
}
