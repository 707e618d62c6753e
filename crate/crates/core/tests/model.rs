mod common;

use common::gradcheck::{loss_gradient_errors, per_tensor_control_errors};
use common::rng;
use rand::Rng;
use stipple::model::{
    self, base_layout, build_condition, condition_encode, control_layout, feature_map, init_base, init_control,
    Binder, ConditionNodes, Denoiser, ModelError, ParamSet, Variant, CONDITION_CHANNELS, FEATURE_CHANNELS,
};
use stipple::stipplers::ConditionInputs;
use stipple::tensor::{Graph, Tensor};
use stipple::{transport, GrayImage, PointSet, Scalar};

fn random_image(seed: u64, side: usize) -> GrayImage {
    let mut r = rng(seed);
    GrayImage::new(side, side, (0..side * side).map(|_| r.random_range(20..=255)).collect()).unwrap()
}

fn random_offsets<T: Scalar>(seed: u64, k: usize) -> Tensor<T> {
    let mut r = rng(seed);
    Tensor::from_fn([1, 2, k, k], |_| T::of(r.random_range(-1.5..1.5)))
}

#[test]
fn zero_injection_is_exact_at_init() {
    let base = init_base::<f32>(11);
    for variant in [Variant::FULL, Variant::VANILLA, Variant::GATED, Variant::GECCO] {
        let control = init_control(&base, variant, 12).unwrap();
        let plain = Denoiser::unconditional(base.clone());
        let controlled = Denoiser::controlled(base.clone(), control).unwrap();
        assert_eq!(controlled.variant, variant);
        let reps = if variant == Variant::FULL { 100 } else { 5 };
        for i in 0..reps {
            let k = [4, 6, 8][i % 3];
            let cond = controlled.prepare(&ConditionInputs::from_image(random_image(i as u64, 32), k).unwrap()).unwrap();
            let x = random_offsets::<f32>(1000 + i as u64, k);
            let t = 1 + (i * 97) % 1000;
            let a = plain.denoise(&x, t, None).unwrap();
            let b = controlled.denoise(&x, t, Some(&cond)).unwrap();
            assert!(a == b, "{} input {i}: controlled output differs from base", variant.name());
        }
    }
}

#[test]
fn constant_image_gives_identical_interior_features() {
    let base = init_base::<f64>(1);
    let control = init_control(&base, Variant::FULL, 2).unwrap();
    let mut g = Graph::<f64>::new();
    let mut b = Binder::new(vec![(&control, false)]);
    let img = g.constant(Tensor::full([1, 1, 64, 64], 0.4));
    let map = feature_map(&mut b, &mut g, img).unwrap();
    // zero padding touches the outer three pixels; stay clear of them
    let mut r = rng(3);
    let pts: Vec<[f64; 2]> = (0..16).map(|_| [r.random_range(0.1..0.9), r.random_range(0.1..0.9)]).collect();
    let s = g.bilinear_sample(map, &pts, (4, 4)).unwrap();
    let v = g.value(s);
    for c in 0..FEATURE_CHANNELS {
        let first = v.at4(0, c, 0, 0);
        for i in 0..16 {
            assert!((v.at4(0, c, i / 4, i % 4) - first).abs() < 1e-12);
        }
    }
}

#[test]
fn features_at_center_match_manual_bilinear() {
    let base = init_base::<f64>(1);
    let control = init_control(&base, Variant::FULL, 2).unwrap();
    let mut g = Graph::<f64>::new();
    let mut b = Binder::new(vec![(&control, false)]);
    let c = ConditionInputs::from_image(random_image(5, 32), 2).unwrap();
    let img = g.constant(model::image_tensor(&c));
    let map = feature_map(&mut b, &mut g, img).unwrap();
    let density = g.constant(model::density_tensor(&c));
    // stratum 3 of a 2x2 grid is centred at (0.75, 0.75); push it to the image centre
    let mut offsets = Tensor::<f64>::zeros([1, 2, 2, 2]);
    offsets.data_mut()[3] = -0.5;
    offsets.data_mut()[4 + 3] = -0.5;
    let x2 = g.constant(offsets);
    let cond = build_condition(&mut g, x2, &ConditionNodes { features: Some(map), density }).unwrap();
    let fm = g.value(map).clone();
    let got = g.value(cond);
    // (0.5, 0.5) sits between pixels 15 and 16 of a 32-wide map
    for ch in 0..FEATURE_CHANNELS {
        let manual = 0.25 * (fm.at4(0, ch, 15, 15) + fm.at4(0, ch, 15, 16) + fm.at4(0, ch, 16, 15) + fm.at4(0, ch, 16, 16));
        assert!((got.at4(0, ch, 1, 1) - manual).abs() < 1e-6);
    }
}

#[test]
fn condition_layout_and_slicing() {
    let k = 4;
    let base = init_base::<f64>(1);
    let control = init_control(&base, Variant::FULL, 2).unwrap();
    let c = ConditionInputs::from_image(random_image(9, 32), k).unwrap();
    let offsets = random_offsets::<f64>(4, k);
    let mut g = Graph::<f64>::new();
    let mut b = Binder::new(vec![(&control, false)]);
    let img = g.constant(model::image_tensor(&c));
    let map = feature_map(&mut b, &mut g, img).unwrap();
    let x = g.constant(offsets.clone());
    let density = g.constant(model::density_tensor(&c));
    let cond = build_condition(&mut g, x, &ConditionNodes { features: Some(map), density }).unwrap();
    let v = g.value(cond).clone();
    assert_eq!(CONDITION_CHANNELS, 19);
    assert_eq!(v.shape(), &[1, 19, k, k]);
    assert_eq!(v.slice_channels(16, 18).unwrap(), offsets);
    assert_eq!(v.slice_channels(18, 19).unwrap(), model::density_tensor::<f64>(&c));

    let enc = condition_encode(&mut b, &mut g, cond).unwrap();
    assert_eq!(g.value(enc).shape(), &[1, 128, k, k]);
    assert!(g.value(enc).is_finite());

    // zero-filled features when the image branch is off
    let none = build_condition(&mut g, x, &ConditionNodes { features: None, density }).unwrap();
    assert!(g.value(none).slice_channels(0, 16).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn black_image_features_come_from_biases_only() {
    let base = init_base::<f64>(1);
    let control = init_control(&base, Variant::FULL, 2).unwrap();
    let mut g = Graph::<f64>::new();
    let mut b = Binder::new(vec![(&control, false)]);
    let img = g.constant(Tensor::zeros([1, 1, 16, 16]));
    let map = feature_map(&mut b, &mut g, img).unwrap();
    let v = g.value(map);
    // a zero input makes layer one exactly its bias everywhere
    let b1 = control.get("feat.conv1.b").unwrap();
    let mut g2 = Graph::<f64>::new();
    let mut b2 = Binder::new(vec![(&control, false)]);
    let img2 = g2.constant(Tensor::zeros([1, 1, 16, 16]));
    let h = b2.param(&mut g2, "feat.conv1.w").unwrap();
    let bias = b2.param(&mut g2, "feat.conv1.b").unwrap();
    let l1 = g2.conv2d(img2, h, Some(bias), stipple::tensor::Conv2dSpec::same(3, 1)).unwrap();
    for c in 0..8 {
        assert!(g2.value(l1).slice_channels(c, c + 1).unwrap().data().iter().all(|&x| x == b1.data()[c]));
    }
    // and the interior of the final map is constant
    for c in 0..FEATURE_CHANNELS {
        assert!((v.at4(0, c, 7, 7) - v.at4(0, c, 8, 9)).abs() < 1e-12);
    }
}

#[test]
fn features_follow_strata_not_input_order() {
    let mut r = rng(21);
    let pts: Vec<[f64; 2]> = (0..16).map(|_| [r.random(), r.random()]).collect();
    let mut perm = pts.clone();
    perm.reverse();
    let a = transport::encode(&PointSet::new(pts)).unwrap();
    let b = transport::encode(&PointSet::new(perm)).unwrap();
    let (ta, tb) = (a.to_tensor::<f64>(), b.to_tensor::<f64>());
    assert_eq!(ta, tb);
    assert_eq!(model::positions_from_offsets(&ta).unwrap(), model::positions_from_offsets(&tb).unwrap());
}

#[test]
fn denoise_rejects_bad_shapes_and_is_deterministic() {
    let d = Denoiser::unconditional(init_base::<f32>(3));
    assert!(matches!(d.denoise(&Tensor::zeros([1, 3, 4, 4]), 5, None), Err(ModelError::Input(_))));
    assert!(matches!(d.denoise(&Tensor::zeros([1, 2, 4, 6]), 5, None), Err(ModelError::Input(_))));
    let x = random_offsets::<f32>(8, 8);
    let a = d.denoise(&x, 17, None).unwrap();
    let b = d.denoise(&x, 17, None).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));

    let control = init_control(&d.base, Variant::FULL, 1).unwrap();
    let c = Denoiser::controlled(d.base.clone(), control).unwrap();
    let cond = c.prepare(&ConditionInputs::from_image(random_image(1, 32), 8).unwrap()).unwrap();
    assert!(matches!(c.denoise(&random_offsets(1, 4), 5, Some(&cond)), Err(ModelError::ConditionSize { .. })));
}

#[test]
fn checkpoints_roundtrip_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let base = init_base::<f32>(5);
    let control = init_control(&base, Variant::GATED, 6).unwrap();
    let (bp, cp) = (dir.path().join("base.sdck"), dir.path().join("control.sdck"));
    base.save(&bp).unwrap();
    control.save(&cp).unwrap();
    assert!(ParamSet::<f32>::load(&bp).unwrap().identical(&base));
    let d = Denoiser::<f32>::load(&bp, Some(&cp), Some(Variant::GATED)).unwrap();
    assert!(d.control.as_ref().unwrap().identical(&control));
    assert!(matches!(Denoiser::<f32>::load(&bp, Some(&cp), Some(Variant::FULL)), Err(ModelError::Variant { .. })));
    // a control file is not a base file
    assert!(Denoiser::<f32>::load(&cp, None, None).is_err());
    assert!(ParamSet::<f32>::load(&dir.path().join("absent")).is_err());
    assert!(base.check_layout(&base_layout()).is_ok());
    assert!(control.check_layout(&control_layout()).is_ok());
}

#[test]
fn control_encoder_is_copied_from_base() {
    let base = init_base::<f32>(5);
    let control = init_control(&base, Variant::FULL, 6).unwrap();
    for (name, t) in control.iter().filter(|(n, _)| n.starts_with("control.down") || n.starts_with("control.mid") || n.starts_with("control.conv_in")) {
        let src = base.get(&name.replacen("control.", "base.", 1)).unwrap();
        assert_eq!(**t, **src, "{name}");
    }
    for (name, t) in control.iter().filter(|(n, _)| n.starts_with("control.inject")) {
        assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
    }
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    for c in loss_gradient_errors() {
        assert!(c.f64_control < 1e-6, "cfg {} f64 rel err {:e}", c.config, c.f64_control);
        assert!(c.f32_control < 1e-3, "cfg {} f32 rel err {:e}", c.config, c.f32_control);
        assert!(c.f64_base < 1e-6, "cfg {} base f64 rel err {:e}", c.config, c.f64_base);
    }
}

#[test]
fn every_control_tensor_gradient_matches_finite_differences() {
    for (name, e) in per_tensor_control_errors() {
        assert!(e < 1e-6, "{name}: rel err {e:e}");
    }
}
