use onh_core::data_pipeline::{crop_roi, normalize_to_canonical, CanonicalStats, FundusImage};
use onh_core::networks::{GuidedConfig, Model, ModelConfig, NetworkConfig, OutputActivation};
use onh_core::nn_core::{BlockKind, Mode, Session};
use onh_core::pseudo_depth::make_pseudo_depth;
use onh_core::raster::{Grid, ProbabilityMap};
use onh_core::synthetic::{synthetic_corpus, SyntheticEye};
use onh_core::training::*;
use onh_core::CoreError;
use onh_tensor::{berhu, Graph, Shape, Tensor};
use proptest::prelude::*;

fn t(v: &[f64]) -> Tensor {
    Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

#[test]
fn closed_form_loss_oracles() {
    let zero = t(&[0.0, 0.0, 0.0]);
    let cases: Vec<(&str, f64, f64)> = vec![
        ("l2 equal", loss_l2(&t(&[0.3, 0.7]), &t(&[0.3, 0.7])).unwrap(), 0.0),
        ("l2 3-4-5", loss_l2(&t(&[3.0, 4.0]), &t(&[0.0, 0.0])).unwrap(), 5.0),
        ("l2 shifted", loss_l2(&t(&[4.0, 6.0]), &t(&[1.0, 2.0])).unwrap(), 5.0),
        ("l2 single", loss_l2(&t(&[-2.5]), &t(&[0.0])).unwrap(), 2.5),
        ("l2 ones", loss_l2(&t(&[1.0; 4]), &t(&[0.0; 4])).unwrap(), 2.0),
        ("l1 equal", loss_l1(&zero, &zero).unwrap(), 0.0),
        ("l1 1,-2,3", loss_l1(&t(&[1.0, -2.0, 3.0]), &zero).unwrap(), 6.0),
        ("l1 signs", loss_l1(&t(&[0.5, 0.5]), &t(&[1.0, 0.0])).unwrap(), 1.0),
        ("l1 single", loss_l1(&t(&[-0.25]), &t(&[0.0])).unwrap(), 0.25),
        ("berhu zero", loss_berhu(&zero, &zero).unwrap(), 0.0),
        ("berhu single 1", loss_berhu(&t(&[1.0]), &t(&[0.0])).unwrap(), 2.6),
        ("berhu single -3", loss_berhu(&t(&[-3.0]), &t(&[0.0])).unwrap(), 7.8),
        ("berhu single 0.5", loss_berhu(&t(&[0.5]), &t(&[0.0])).unwrap(), 1.3),
        // c = 2: |1| and |2| sit on the linear branch, 10 on the quadratic.
        ("berhu mixed", loss_berhu(&t(&[1.0, -2.0, 10.0]), &zero).unwrap(), 1.0 + 2.0 + (100.0 + 4.0) / 4.0),
        // c = 0.8: |0.5| linear, |4| quadratic.
        ("berhu pair", loss_berhu(&t(&[0.5, 4.0]), &t(&[0.0, 0.0])).unwrap(), 0.5 + (16.0 + 0.64) / 1.6),
        ("berhu knee", berhu(0.3, 0.3), 0.3),
        ("berhu linear", berhu(-0.2, 0.3), 0.2),
        ("berhu quadratic", berhu(0.6, 0.3), (0.36 + 0.09) / 0.6),
        ("threshold", berhu_threshold(&t(&[0.1, -5.0, 2.0]), &t(&[0.0; 3])).unwrap(), 1.0),
        ("threshold zero", berhu_threshold(&zero, &zero).unwrap(), 0.0),
    ];
    assert!(cases.len() >= 20);
    for (name, got, want) in &cases {
        assert!(close(*got, *want), "{name}: got {got}, want {want}");
    }
}

#[test]
fn berhu_knee_is_continuous_and_threshold_exact() {
    for c in [1e-3, 0.2, 1.0, 7.5] {
        let below = berhu(c * (1.0 - 1e-12), c);
        let at = berhu(c, c);
        let above = berhu(c * (1.0 + 1e-12), c);
        assert!((below - at).abs() <= 1e-9 && (above - at).abs() <= 1e-9, "c = {c}");
        assert!(close(at, c));
    }
    let pred = t(&[0.13, -0.71, 0.4, 0.05]);
    let gt = t(&[0.0, 0.0, 0.1, 0.0]);
    assert_eq!(berhu_threshold(&pred, &gt).unwrap(), 0.2 * 0.71);
    assert_eq!(BERHU_FRACTION, 0.2);
}

fn prob_map(h: usize, w: usize, f: impl Fn(usize) -> [f64; 3]) -> ProbabilityMap {
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        let p = f(i);
        for c in 0..3 {
            data[c * plane + i] = p[c];
        }
    }
    ProbabilityMap::from_planar(h, w, 3, data).unwrap()
}

#[test]
fn cross_entropy_oracles() {
    let labels = Grid::from_fn(2, 3, |y, x| ((y + x) % 3) as u8);
    let sure = ProbabilityMap::one_hot(&labels, 3);
    assert_eq!(loss_multiclass_ce(&sure, &labels).unwrap(), 0.0);
    let uniform = prob_map(2, 3, |_| [1.0 / 3.0; 3]);
    assert!(close(loss_multiclass_ce(&uniform, &labels).unwrap(), 3f64.ln()));
    let half = prob_map(1, 2, |_| [0.5, 0.25, 0.25]);
    let l = Grid::from_vec(1, 2, vec![0u8, 1]).unwrap();
    assert!(close(loss_multiclass_ce(&half, &l).unwrap(), (2f64.ln() + 4f64.ln()) / 2.0));
    let bad = Grid::from_vec(1, 2, vec![0u8, 3]).unwrap();
    assert!(matches!(
        loss_multiclass_ce(&half, &bad),
        Err(CoreError::LabelRange { label: 3, classes: 3 })
    ));
}

#[test]
fn tape_losses_equal_closed_forms() {
    let pred = t(&[0.2, -0.4, 1.3, 0.0, 0.9]);
    let gt = t(&[0.1, 0.1, 0.2, -0.3, 0.9]);
    let mut g = Graph::new();
    let p = g.input(pred.clone());
    let l2 = g.l2_loss(p, &gt).unwrap();
    let l1 = g.l1_loss(p, &gt).unwrap();
    let bh = g.berhu_loss(p, &gt, BERHU_FRACTION).unwrap();
    assert!(close(g.value(l2).item(), loss_l2(&pred, &gt).unwrap()));
    assert!(close(g.value(l1).item(), loss_l1(&pred, &gt).unwrap()));
    assert!(close(g.value(bh).item(), loss_berhu(&pred, &gt).unwrap()));

    let logits = Tensor::from_vec(Shape::new(1, 3, 1, 2), vec![0.5, -1.0, 2.0, 0.0, -0.5, 1.5]).unwrap();
    let labels = Grid::from_vec(1, 2, vec![2u8, 0]).unwrap();
    let ce = g.input(logits.clone());
    let ce = g.cross_entropy_logits(ce, &[2, 0]).unwrap();
    let mut prob = Vec::new();
    for px in 0..2 {
        let z: Vec<f64> = (0..3).map(|c| logits.data()[c * 2 + px]).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        prob.push(z.iter().map(|v| (v - m).exp() / sum).collect::<Vec<_>>());
    }
    let pm = prob_map(1, 2, |i| [prob[i][0], prob[i][1], prob[i][2]]);
    assert!(close(g.value(ce).item(), loss_multiclass_ce(&pm, &labels).unwrap()));
}

proptest! {
    #[test]
    fn berhu_dominates_l1(r in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let zero = t(&vec![0.0; r.len()]);
        let pred = t(&r);
        let c = berhu_threshold(&pred, &zero).unwrap();
        let bh = loss_berhu(&pred, &zero).unwrap();
        let l1 = loss_l1(&pred, &zero).unwrap();
        prop_assert!(bh >= l1 - 1e-12);
        let all_linear = r.iter().all(|v| v.abs() <= c);
        prop_assert_eq!(all_linear, (bh - l1).abs() <= 1e-12 * l1.max(1.0));
        for v in &r {
            prop_assert!(berhu(*v, c) >= v.abs() - 1e-15);
        }
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_at_equality(
        a in prop::collection::vec(-3.0f64..3.0, 1..20),
        shift in -1.0f64..1.0,
    ) {
        let pa = t(&a);
        let b: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let pb = t(&b);
        for f in [loss_l2, loss_l1, loss_berhu] {
            prop_assert_eq!(f(&pa, &pa).unwrap(), 0.0);
            let v = f(&pa, &pb).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, shift == 0.0);
        }
    }
}

fn small_net(res: usize, levels: usize, base: usize) -> NetworkConfig {
    NetworkConfig {
        input_resolution: res,
        base_filters: base,
        encoder_levels: levels,
        block_kind: BlockKind::Dri,
        ..NetworkConfig::depth()
    }
}

fn small_seg_config(res: usize, levels: usize, base: usize) -> ModelConfig {
    ModelConfig::Segmentation {
        net: NetworkConfig {
            out_channels: 3,
            output_activation: OutputActivation::Softmax,
            ..small_net(res, levels, base)
        },
        guide: Some(GuidedConfig::alternate(levels - 1)),
    }
}

struct Crop {
    raw: FundusImage,
    image: FundusImage,
    depth: Grid<f64>,
    labels: Grid<u8>,
}

fn crops(eyes: &[SyntheticEye], res: usize) -> Vec<Crop> {
    let raws: Vec<FundusImage> = eyes.iter().map(|e| crop_roi(&e.image, e.roi, Some(res)).unwrap()).collect();
    let canonical = CanonicalStats::from_image(&raws[0]).unwrap();
    eyes.iter()
        .zip(raws)
        .map(|(e, raw)| {
            let depth = onh_core::data_pipeline::resample::resize_bilinear(&e.roi.crop_grid(&e.depth).unwrap(), res, res);
            let labels = onh_core::data_pipeline::resample::resize_nearest(&e.roi.crop_grid(&e.labels).unwrap(), res, res);
            Crop {
                image: normalize_to_canonical(&raw, &canonical).unwrap(),
                raw,
                depth,
                labels,
            }
        })
        .collect()
}

fn depth_examples(c: &[Crop]) -> Vec<Example> {
    let (lo, hi) = c
        .iter()
        .flat_map(|c| c.depth.data().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    c.iter()
        .map(|c| Example {
            image: c.image.to_tensor(),
            target: ExampleTarget::Map(c.depth.map(|v| (v - lo) / (hi - lo)).to_tensor()),
            guide: None,
        })
        .collect()
}

fn seg_examples(c: &[Crop]) -> Vec<Example> {
    c.iter()
        .map(|c| Example {
            image: c.image.to_tensor(),
            target: ExampleTarget::Labels(c.labels.data().iter().map(|&v| v as usize).collect()),
            guide: Some(make_pseudo_depth(&c.raw).unwrap().values.to_tensor()),
        })
        .collect()
}

fn depth_model(seed: u64) -> Model {
    Model::build(ModelConfig::Depth { net: small_net(32, 5, 8) }, seed).unwrap()
}

fn config(lr: f64, batch: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        learning_rate: lr,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn defaults_follow_declared_budget() {
    let c = TrainConfig::default();
    assert_eq!(c.batch_size, 10);
    assert_eq!(c.epochs, DEPTH_EPOCHS);
    assert_eq!((PRETRAIN_EPOCHS, DEPTH_EPOCHS, SEG_EPOCHS), (50, 200, 100));
    assert_eq!(c.patience, 20);
    let a = AdamConfig::default();
    assert_eq!((a.learning_rate, a.beta1, a.beta2), (2e-4, 0.5, 0.999));
    assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
    assert!(matches!(
        PretrainTask::Denoising { noise_sigma: -1.0 }.objective(),
        Err(CoreError::Config(_))
    ));
    assert_eq!(PretrainTask::PseudoDepth.objective().unwrap(), Objective::Regression { loss: LossKind::L2 });
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = depth_examples(&crops(&synthetic_corpus(2, 32, 3), 32));
    let model = depth_model(4);
    let before = model.params.clone();
    let mut tr = Trainer::new(model, config(0.0, 2, 1), Objective::Regression { loss: LossKind::L2 }).unwrap();
    tr.next_step(&data).unwrap();
    for id in before.ids() {
        assert_eq!(before.get(id), tr.model.params.get(id), "{}", before.name(id));
    }
}

#[test]
fn resume_reproduces_the_next_step_bit_identically() {
    let data = depth_examples(&crops(&synthetic_corpus(3, 32, 5), 32));
    let objective = Objective::Regression { loss: LossKind::Berhu };
    let mut straight = Trainer::new(depth_model(7), config(2e-4, 2, 9), objective).unwrap();
    for _ in 0..3 {
        straight.next_step(&data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    straight.checkpoint(None).save(&path).unwrap();
    let (a, _) = straight.next_step(&data).unwrap();

    let mut resumed = Trainer::resume(Checkpoint::load(&path).unwrap(), objective).unwrap();
    let (b, _) = resumed.next_step(&data).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(straight.state, resumed.state);
    for id in straight.model.params.ids() {
        assert_eq!(straight.model.params.get(id), resumed.model.params.get(id));
    }
    assert_eq!(straight.model.params.bn_states(), resumed.model.params.bn_states());
}

#[test]
fn noiseless_denoising_loss_decreases_monotonically() {
    let c = crops(&synthetic_corpus(4, 32, 11), 32);
    let data: Vec<Example> = c
        .iter()
        .map(|c| Example {
            image: c.image.to_tensor(),
            target: ExampleTarget::Map(c.raw.to_tensor()),
            guide: None,
        })
        .collect();
    let net = NetworkConfig {
        out_channels: 3,
        ..small_net(32, 5, 8)
    };
    let model = Model::build(ModelConfig::Depth { net }, 2).unwrap();
    let objective = PretrainTask::Denoising { noise_sigma: 0.0 }.objective().unwrap();
    let mut tr = Trainer::new(model, config(2e-4, 4, 3), objective).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| tr.next_step(&data).unwrap().0).collect();
    for (i, w) in losses.windows(2).enumerate() {
        assert!(w[1] < w[0], "step {}: {} -> {}", i + 1, w[0], w[1]);
    }
}

fn train_until(tr: &mut Trainer, data: &[Example], steps: usize, target: f64) -> (usize, f64) {
    let mut score = f64::INFINITY;
    for step in 1..=steps {
        tr.next_step(data).unwrap();
        if step % 10 == 0 {
            score = validation_score(&tr.model, tr.objective, data).unwrap();
            if score < target {
                return (step, score);
            }
        }
    }
    (steps, score)
}

#[test]
fn depth_net_overfits_two_pairs() {
    let data = depth_examples(&crops(&synthetic_corpus(2, 32, 21), 32));
    let mut tr = Trainer::new(depth_model(1), config(2e-4, 2, 1), Objective::Regression { loss: LossKind::L2 }).unwrap();
    let (steps, rmse) = train_until(&mut tr, &data, 500, 0.05);
    assert!(rmse < 0.05, "RMSE {rmse} after {steps} steps");
}

#[test]
fn guided_seg_net_overfits_two_pairs() {
    let data = seg_examples(&crops(&synthetic_corpus(2, 32, 22), 32));
    let model = Model::build(small_seg_config(32, 5, 16), 2).unwrap();
    let mut tr = Trainer::new(model, config(1e-3, 2, 2), Objective::Segmentation).unwrap();
    let (steps, ce) = train_until(&mut tr, &data, 500, 0.01);
    assert!(ce < 0.01, "CE {ce} after {steps} steps");
}

#[test]
fn pseudo_depth_pretraining_reconstructs_targets() {
    let c = crops(&synthetic_corpus(4, 32, 31), 32);
    let data: Vec<Example> = c
        .iter()
        .map(|c| Example {
            image: c.image.to_tensor(),
            target: ExampleTarget::Map(make_pseudo_depth(&c.raw).unwrap().values.to_tensor()),
            guide: None,
        })
        .collect();
    let objective = PretrainTask::PseudoDepth.objective().unwrap();
    let mut tr = Trainer::new(depth_model(3), config(2e-4, 4, 3), objective).unwrap();
    let (steps, rmse) = train_until(&mut tr, &data, 500, 0.05);
    assert!(rmse < 0.05, "RMSE {rmse} after {steps} steps");
}

#[test]
fn warm_start_copies_matching_tensors_only() {
    let source = Model::build(
        ModelConfig::Depth {
            net: NetworkConfig {
                out_channels: 3,
                ..small_net(32, 5, 8)
            },
        },
        1,
    )
    .unwrap();
    let mut target = depth_model(2);
    let copied = warm_start(&mut target.params, &source.params).unwrap();
    assert!(copied > 0 && copied < target.params.len());
    let mut mismatched = 0;
    for id in target.params.ids() {
        let sid = source.params.find(target.params.name(id)).unwrap();
        if source.params.get(sid).shape() == target.params.get(id).shape() {
            assert_eq!(source.params.get(sid), target.params.get(id));
        } else {
            mismatched += 1;
        }
    }
    assert_eq!(copied + mismatched, target.params.len());
}

#[test]
fn fine_tuning_requires_the_same_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seg.ckpt");
    let source = Model::build(small_seg_config(32, 5, 4), 5).unwrap();
    Checkpoint::new(source.clone()).save(&path).unwrap();
    let mut same = Model::build(small_seg_config(32, 5, 4), 6).unwrap();
    fine_tune_init(&mut same, &path).unwrap();
    for id in same.params.ids() {
        assert_eq!(same.params.get(id), source.params.get(id));
    }
    let mut other = Model::build(small_seg_config(32, 5, 8), 6).unwrap();
    assert!(matches!(fine_tune_init(&mut other, &path), Err(CoreError::Checkpoint(_))));
}

#[test]
fn warm_started_depth_training_converges_sooner() {
    let c = crops(&synthetic_corpus(6, 32, 41), 32);
    let pretrain: Vec<Example> = c
        .iter()
        .map(|c| Example {
            image: c.image.to_tensor(),
            target: ExampleTarget::Map(make_pseudo_depth(&c.raw).unwrap().values.to_tensor()),
            guide: None,
        })
        .collect();
    let data = depth_examples(&c);
    let (train, val) = data.split_at(4);
    let objective = PretrainTask::PseudoDepth.objective().unwrap();
    let mut pre = Trainer::new(depth_model(8), config(2e-4, 4, 8), objective).unwrap();
    for _ in 0..150 {
        pre.next_step(&pretrain).unwrap();
    }
    let epochs_to = |mut tr: Trainer| {
        for epoch in 1..=200 {
            tr.next_step(train).unwrap();
            if validation_score(&tr.model, tr.objective, val).unwrap() < 0.1 {
                return epoch;
            }
        }
        usize::MAX
    };
    let depth_objective = Objective::Regression { loss: LossKind::L2 };
    let mut warm = depth_model(9);
    warm_start(&mut warm.params, &pre.model.params).unwrap();
    let warm_epochs = epochs_to(Trainer::new(warm, config(2e-4, 4, 9), depth_objective).unwrap());
    let cold_epochs = epochs_to(Trainer::new(depth_model(9), config(2e-4, 4, 9), depth_objective).unwrap());
    assert!(warm_epochs < cold_epochs, "warm {warm_epochs} vs cold {cold_epochs}");
}

#[test]
fn run_checkpoints_logs_and_restores_best() {
    let data = seg_examples(&crops(&synthetic_corpus(3, 32, 51), 32));
    let model = Model::build(small_seg_config(32, 5, 4), 3).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..config(1e-3, 2, 4)
    };
    let mut tr = Trainer::new(model, cfg, Objective::Segmentation).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    let mut sink = |r: &LogRecord| {
        records.push(r.clone());
        Ok(())
    };
    let summary = tr
        .run(
            &data[..2],
            &data[2..],
            &mut RunHooks {
                checkpoint_dir: Some(dir.path()),
                on_record: Some(&mut sink),
                template: None,
            },
        )
        .unwrap();
    assert_eq!(summary.epochs, 3);
    assert_eq!(records.len(), 3);
    let pixels = 2.0 * 32.0 * 32.0;
    for r in &records {
        assert!(r.val.is_some());
        assert!(close(r.loss_sum.unwrap(), r.loss * pixels));
    }
    let best = Checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    assert!(dir.path().join("last.ckpt").exists());
    for id in best.model.params.ids() {
        assert_eq!(best.model.params.get(id), tr.model.params.get(id));
    }
    let val = validation_score(&tr.model, tr.objective, &data[2..]).unwrap();
    assert_eq!(Some(val), summary.best_val);
}

#[test]
fn eval_loss_is_side_effect_free() {
    let data = depth_examples(&crops(&synthetic_corpus(2, 32, 61), 32));
    let model = depth_model(5);
    let batch: Vec<&Example> = data.iter().collect();
    let a = eval_loss(&model, Objective::Regression { loss: LossKind::L1 }, &batch).unwrap();
    let b = eval_loss(&model, Objective::Regression { loss: LossKind::L1 }, &batch).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    let mut s = Session::new(&model.params, Mode::Eval);
    let x = s.input(data[0].image.clone());
    let y = model.forward(&mut s, x, None).unwrap();
    assert!(s.value(y).data().iter().all(|v| v.abs() <= 1.0));
}
