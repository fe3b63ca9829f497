mod common;

use idsr::image::GrayImage;
use idsr::network::*;
use idsr_tensor::{Tape, Tensor};
use proptest::prelude::*;

#[test]
fn descriptor_contract() {
    let cfg = ExtractorConfig {
        descriptor_dim: 24,
        classes: 6,
        ..ExtractorConfig::default()
    };
    let f = build_extractor(&cfg, 5).unwrap().frozen_copy();
    let img = GrayImage::from_fn(64, 64, |x, y| ((x ^ y) % 7) as f64 / 6.0).unwrap();
    let a = f.infer_descriptors(&img.to_tensor()).unwrap();
    let b = f.infer_descriptors(&img.to_tensor()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[1, 24]);
    assert_eq!(f.descriptor_dim(), Some(24));

    let mut tape = Tape::new();
    let x = tape.constant(img.to_tensor());
    let d = f.descriptor(&mut tape, x).unwrap();
    assert!(!tape.requires_grad(d));
    let total = tape.sum(d).unwrap();
    assert!(tape.backward(total).is_ok());

    let small = GrayImage::filled(32, 32, 0.5).unwrap();
    assert!(f.infer_descriptors(&small.to_tensor()).is_err());
}

#[test]
fn generator_parameters_are_glorot_bounded() {
    let g = build_generator(&GeneratorConfig::default(), 2).unwrap();
    for (name, t) in g.parameters() {
        if name.ends_with(".bias") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            continue;
        }
        let s = t.shape();
        let rf: usize = s[2..].iter().product();
        let (fan_in, fan_out) = if name.starts_with("up") { (s[0] * rf, s[1] * rf) } else { (s[1] * rf, s[0] * rf) };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
        assert!(t.data().iter().all(|&v| f64::from(v as f32) == v), "{name} not on the f32 grid");
    }
}

#[test]
fn identity_stub_pipeline() {
    let g = Network::identity();
    assert_eq!(g.scale(), Some(1));
    let x = Tensor::full(&[2, 1, 3, 3], 0.25);
    assert_eq!(g.infer(&x).unwrap(), x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generator_shape_contract(stages in 1usize..4, h in 1usize..6, w in 1usize..6, b in 1usize..3, seed in any::<u64>(), skip in any::<bool>()) {
        let cfg = GeneratorConfig {
            scale: 1 << stages,
            channels: vec![2; stages + 1],
            refine_kernel: if seed % 2 == 0 { Some(3) } else { None },
            bicubic_skip: skip,
            ..GeneratorConfig::default()
        };
        let g = build_generator(&cfg, seed).unwrap();
        let out = g.infer(&Tensor::zeros(&[b, 1, h, w])).unwrap();
        prop_assert_eq!(out.shape(), &[b, 1, h << stages, w << stages]);
    }
}
