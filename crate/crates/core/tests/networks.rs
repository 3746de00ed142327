use onh_core::data_pipeline::FundusImage;
use onh_core::networks::*;
use onh_core::nn_core::{BlockKind, Mode, Session};
use onh_core::raster::Grid;
use onh_core::training::{Example, ExampleTarget, Objective, TrainConfig, Trainer};
use onh_core::CoreError;
use onh_tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(kind: BlockKind, levels: usize, res: usize) -> NetworkConfig {
    NetworkConfig {
        input_resolution: res,
        base_filters: 4,
        encoder_levels: levels,
        block_kind: kind,
        ..NetworkConfig::depth()
    }
}

fn small_seg(levels: usize, res: usize) -> NetworkConfig {
    NetworkConfig {
        out_channels: 3,
        output_activation: OutputActivation::Softmax,
        ..small(BlockKind::Dri, levels, res)
    }
}

fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn filter_schedule_caps_at_512() {
    assert_eq!(NetworkConfig::depth().filter_schedule(), vec![64, 128, 256, 512, 512, 512, 512, 512]);
}

#[test]
fn config_validation() {
    let mut c = NetworkConfig::depth();
    c.input_resolution = 200;
    assert!(matches!(Model::build(ModelConfig::Depth { net: c }, 0), Err(CoreError::Config(_))));
    let mut c = NetworkConfig::depth();
    c.max_filters = 256;
    assert!(c.validate().is_err());
    let g = GuidedConfig {
        fusion_levels: vec![2, 7],
        ..GuidedConfig::default()
    };
    assert!(g.validate(&NetworkConfig::segmentation()).is_err());
}

#[test]
fn full_depth_net_maps_256_to_256() {
    let model = Model::build(ModelConfig::Depth { net: NetworkConfig::depth() }, 1).unwrap();
    let x = rand_tensor(Shape::new(1, 3, 256, 256), 2);
    let mut s = Session::new(&model.params, Mode::Eval);
    let xv = s.input(x.clone());
    let y = model.forward(&mut s, xv, None).unwrap();
    let t = s.value(y);
    assert_eq!(t.shape(), Shape::new(1, 1, 256, 256));
    assert!(t.data().iter().all(|v| v.abs() < 1.0));
    let Arch::Depth(net) = &model.arch else { panic!() };
    assert_eq!(net.dropout_flags(), vec![true, true, true, false, false, false, false, false]);
}

#[test]
fn full_guided_net_has_three_fusions_and_valid_probabilities() {
    let cfg = ModelConfig::Segmentation {
        net: NetworkConfig::segmentation(),
        guide: Some(GuidedConfig::default()),
    };
    let model = Model::build(cfg, 3).unwrap();
    let Arch::Segmentation(net) = &model.arch else { panic!() };
    assert_eq!(net.fusion_points(), 3);
    assert_eq!(net.guide.as_ref().unwrap().encoder.len(), 6);
    assert_eq!(net.main.encoder.len(), 8);
    let image = rand_tensor(Shape::new(1, 3, 256, 256), 4);
    let guide = rand_tensor(Shape::new(1, 1, 256, 256), 5).map(|v| 0.5 * (v + 1.0));
    let p = model.predict_probabilities(&image, Some(&guide)).unwrap();
    assert_eq!(p.shape(), Shape::new(1, 3, 256, 256));
    let plane = 256 * 256;
    for i in 0..plane {
        let s: f64 = (0..3).map(|c| p.data()[c * plane + i]).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert!(p.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn builds_and_forwards_are_deterministic() {
    for kind in [BlockKind::Residual, BlockKind::Dri] {
        let cfg = ModelConfig::Depth { net: small(kind, 4, 32) };
        let a = Model::build(cfg.clone(), 7).unwrap();
        let b = Model::build(cfg, 7).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.params.parameter_count(), b.params.parameter_count());
        let x = rand_tensor(Shape::new(2, 3, 32, 32), 8);
        let y1 = a.predict_depth(&x).unwrap();
        let y2 = a.predict_depth(&x).unwrap();
        assert_eq!(y1, y2);
        assert!(y1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn encoder_levels_halve_spatial_dims() {
    let model = Model::build(ModelConfig::Depth { net: small(BlockKind::Dri, 5, 64) }, 0).unwrap();
    let Arch::Depth(net) = &model.arch else { panic!() };
    let mut s = Session::new(&model.params, Mode::Eval);
    let mut x = s.input(rand_tensor(Shape::new(1, 3, 64, 64), 1));
    let mut side = 64;
    for level in &net.encoder {
        x = level.forward(&mut s, x).unwrap();
        side /= 2;
        let sh = s.value(x).shape();
        assert_eq!((sh.h(), sh.w(), sh.c()), (side, side, level.channels));
    }
}

#[test]
fn forward_depth_checks_resolution() {
    let model = Model::build(ModelConfig::Depth { net: small(BlockKind::Dri, 3, 16) }, 0).unwrap();
    let img = FundusImage::new(16, 16, vec![0.2; 3 * 256], "a").unwrap();
    let d = forward_depth(&model, &img).unwrap();
    assert_eq!(d.dims(), (16, 16));
    let wrong = FundusImage::new(8, 8, vec![0.2; 3 * 64], "b").unwrap();
    assert!(matches!(forward_depth(&model, &wrong), Err(CoreError::Shape(_))));
}

#[test]
fn guide_path_is_live_and_constant_input_is_finite() {
    let cfg = ModelConfig::Segmentation {
        net: small_seg(4, 32),
        guide: Some(GuidedConfig::alternate(2)),
    };
    let model = Model::build(cfg, 9).unwrap();
    let image = FundusImage::new(32, 32, vec![0.3; 3 * 1024], "c").unwrap();
    let zero = Grid::filled(32, 32, 0.0);
    let ramp = Grid::from_fn(32, 32, |y, x| (y + x) as f64 / 62.0);
    let a = forward_seg(&model, &image, Some(&zero)).unwrap();
    let b = forward_seg(&model, &image, Some(&ramp)).unwrap();
    let diff = a.data().iter().zip(b.data()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(diff > 0.0);
    assert!(a.data().iter().all(|v| v.is_finite()));
    assert!(a.normalization_error() < 1e-6);
    assert!(forward_seg(&model, &image, None).is_err());
    let small_guide = Grid::filled(16, 16, 0.0);
    assert!(matches!(forward_seg(&model, &image, Some(&small_guide)), Err(CoreError::Shape(_))));
}

#[test]
fn one_step_updates_guide_branch() {
    let cfg = ModelConfig::Segmentation {
        net: small_seg(4, 32),
        guide: Some(GuidedConfig::alternate(2)),
    };
    let model = Model::build(cfg, 10).unwrap();
    let before = model.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ex = Example {
        image: rand_tensor(Shape::new(1, 3, 32, 32), 12),
        target: ExampleTarget::Labels((0..1024).map(|_| rng.random_range(0..3)).collect()),
        guide: Some(rand_tensor(Shape::new(1, 1, 32, 32), 13)),
    };
    let mut t = Trainer::new(model, TrainConfig::default(), Objective::Segmentation).unwrap();
    t.step_on(&[&ex]).unwrap();
    let changed = t
        .model
        .params
        .ids()
        .filter(|&id| t.model.params.name(id).starts_with("guide."))
        .any(|id| t.model.params.get(id) != before.get(id));
    assert!(changed);
}
