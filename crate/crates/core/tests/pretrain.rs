use std::collections::BTreeMap;

use proptest::prelude::*;
use sqs_core::autodiff::{Array, Graph};
use sqs_core::pretrain::{
    adamw_step, evaluate_loss, horizontal_flip_augment, load_training_checkpoint, lr_schedule, pretrain_step,
    reconstruction_loss, reconstruction_loss_node, reflect_gaussian, save_training_checkpoint, AdamWConfig,
    LossWeights, OptimizerState,
};
use sqs_core::render::{render_reference, RenderSettings};
use sqs_core::scene::{bake_ground_truth, generate_scene, Bounds, SceneSample, SceneSpec};
use sqs_core::verify::tiny_model_config;
use sqs_core::SqsModel;

fn small_spec() -> SceneSpec {
    SceneSpec {
        bounds: Bounds::cube(1.0).unwrap(),
        n_views: 2,
        image_size: (32, 32),
        n_objects: 3,
        gaussians_per_object: 10,
        focal: 30.0,
        ..SceneSpec::default()
    }
}

fn small_sample(seed: u64) -> SceneSample {
    bake_ground_truth(&generate_scene(&small_spec(), seed).unwrap()).unwrap()
}

fn ramp(n: usize, scale: f64) -> Array {
    Array::matrix(n, 1, (0..n).map(|i| scale * (i % 7) as f64).collect())
}

#[test]
fn loss_is_zero_at_the_target() {
    let rgb = ramp(48, 0.1);
    let d = ramp(16, 0.5);
    let l = reconstruction_loss(&rgb, &d, &rgb, &d, &[true; 16], &LossWeights::default()).unwrap();
    assert_eq!(l, 0.0);
}

#[test]
fn uniform_color_error_costs_its_size() {
    let gt = ramp(48, 0.1);
    let pred = gt.map(|v| v + 0.1);
    let d = ramp(16, 0.5);
    let l = reconstruction_loss(&pred, &d, &gt, &d, &[true; 16], &LossWeights::default()).unwrap();
    assert!((l - 0.1).abs() < 1e-12, "{l}");
}

#[test]
fn one_metre_depth_error_costs_the_depth_weight() {
    let rgb = ramp(48, 0.1);
    let gt = ramp(16, 0.5);
    let pred = gt.map(|v| v + 1.0);
    let mut mask = vec![true; 16];
    mask[3] = false;
    let l = reconstruction_loss(&rgb, &pred, &rgb, &gt, &mask, &LossWeights::default()).unwrap();
    assert!((l - 0.05).abs() < 1e-12, "{l}");
}

#[test]
fn invalid_pixels_do_not_affect_depth_loss() {
    let rgb = ramp(48, 0.1);
    let gt = ramp(16, 0.5);
    let mut mask = vec![true; 16];
    for i in (0..16).step_by(3) {
        mask[i] = false;
    }
    let mut a = gt.clone();
    let mut b = gt.clone();
    for i in 0..16 {
        if !mask[i] {
            a.data_mut()[i] = 100.0;
            b.data_mut()[i] = -7.0;
        }
    }
    let w = LossWeights::default();
    let la = reconstruction_loss(&rgb, &a, &rgb, &gt, &mask, &w).unwrap();
    let lb = reconstruction_loss(&rgb, &b, &rgb, &gt, &mask, &w).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn graph_loss_matches_scalar_loss() {
    let n = 20;
    let mut r = 0.37f64;
    let mut next = || {
        r = (r * 997.0 + 0.123).fract();
        r
    };
    let pred = Array::matrix(n, 4, (0..n * 4).map(|_| next()).collect());
    let gt_rgb = Array::new(vec![4, 5, 3], (0..n * 3).map(|_| next()).collect()).unwrap();
    let gt_depth = Array::new(vec![4, 5], (0..n).map(|_| next() * 4.0).collect()).unwrap();
    let mask: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
    let w = LossWeights::default();
    let mut g = Graph::new();
    let p = g.constant(pred.clone()).unwrap();
    let node = reconstruction_loss_node(&mut g, p, &gt_rgb, &gt_depth, &mask, &w).unwrap();
    let prgb = Array::matrix(n, 3, (0..n).flat_map(|i| pred.row(i)[..3].to_vec()).collect());
    let pdepth = Array::matrix(n, 1, (0..n).map(|i| pred.row(i)[3]).collect());
    let want = reconstruction_loss(&prgb, &pdepth, &gt_rgb, &gt_depth, &mask, &w).unwrap();
    assert!((g.value(node).item() - want).abs() < 1e-14);
}

#[test]
fn schedule_examples() {
    assert_eq!(lr_schedule(500, 2000, 500, 2e-4).unwrap(), 2e-4);
    assert!(lr_schedule(2000, 2000, 500, 2e-4).unwrap().abs() < 1e-12);
    assert!((lr_schedule(1250, 2000, 500, 2e-4).unwrap() - 1e-4).abs() < 1e-15);
    assert!((lr_schedule(250, 2000, 500, 2e-4).unwrap() - 1e-4).abs() < 1e-15);
}

proptest! {
    #[test]
    fn schedule_stays_in_range_and_decays(total in 2u64..5000, warm_frac in 0.0..0.9f64, step in 0u64..6000) {
        let warm = (total as f64 * warm_frac) as u64;
        prop_assume!(warm < total);
        let peak = 2e-4;
        let lr = lr_schedule(step.min(total), total, warm, peak).unwrap();
        prop_assert!((0.0..=peak).contains(&lr));
        let s = step.min(total);
        if s > warm && s < total {
            prop_assert!(lr_schedule(s + 1, total, warm, peak).unwrap() <= lr);
        }
    }
}

fn one_param(v: f64) -> BTreeMap<String, Array> {
    BTreeMap::from([("w".to_string(), Array::scalar(v))])
}

#[test]
fn decay_only_step() {
    let mut p = one_param(1.0);
    let g = one_param(0.0);
    adamw_step(&mut p, &g, &mut OptimizerState::new(), 2e-4, &AdamWConfig::default()).unwrap();
    assert!((p["w"].item() - (1.0 - 2e-6)).abs() < 1e-15);

    let mut p = one_param(1.0);
    let hp = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    adamw_step(&mut p, &g, &mut OptimizerState::new(), 2e-4, &hp).unwrap();
    assert_eq!(p["w"].item(), 1.0);
}

#[test]
fn first_step_on_square_moves_by_lr() {
    let mut p = one_param(1.0);
    let hp = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    adamw_step(&mut p, &one_param(2.0), &mut OptimizerState::new(), 0.1, &hp).unwrap();
    assert!((p["w"].item() - 0.9).abs() < 1e-8, "{}", p["w"].item());
}

#[test]
fn flip_off_is_identity() {
    let s = small_sample(1);
    assert_eq!(horizontal_flip_augment(&s, false).unwrap(), s);
}

#[test]
fn double_flip_restores_the_sample() {
    let s = small_sample(2);
    let back = horizontal_flip_augment(&horizontal_flip_augment(&s, true).unwrap(), true).unwrap();
    assert_eq!(back.rgb, s.rgb);
    assert_eq!(back.depth, s.depth);
    assert_eq!(back.valid_mask, s.valid_mask);
    for (a, b) in back.cameras.iter().zip(&s.cameras) {
        assert!((a.cam_to_world - b.cam_to_world).abs().max() < 1e-12);
        assert!((a.cx - b.cx).abs() < 1e-12);
    }
}

#[test]
fn flipped_cameras_see_the_mirrored_scene() {
    let scene = generate_scene(&small_spec(), 3).unwrap();
    let flipped = horizontal_flip_augment(&bake_ground_truth(&scene).unwrap(), true).unwrap();
    let mirrored: Vec<_> = scene
        .gaussians
        .iter()
        .map(|g| reflect_gaussian(g, &scene.bounds).unwrap())
        .collect();
    for (v, cam) in flipped.cameras.iter().enumerate() {
        let out = render_reference(&mirrored, cam, &RenderSettings::default()).unwrap();
        let rgb = Array::new(flipped.rgb[v].shape().to_vec(), out.rgb.data().to_vec()).unwrap();
        assert!(rgb.max_abs_diff(&flipped.rgb[v]) < 1e-6);
        let depth = Array::new(flipped.depth[v].shape().to_vec(), out.depth.data().to_vec()).unwrap();
        assert!(depth.max_abs_diff(&flipped.depth[v]) < 1e-6);
    }
}

#[test]
fn frozen_forward_is_pure() {
    let model = SqsModel::init(tiny_model_config().unwrap(), 4).unwrap();
    let s = small_sample(4);
    let w = LossWeights::default();
    assert_eq!(
        evaluate_loss(&model, &s, &w).unwrap(),
        evaluate_loss(&model, &s, &w).unwrap()
    );
}

#[test]
fn zero_lr_step_leaves_parameters() {
    let mut model = SqsModel::init(tiny_model_config().unwrap(), 5).unwrap();
    let before = model.params.clone();
    let s = small_sample(5);
    let stats = pretrain_step(
        &mut model,
        &s,
        &mut OptimizerState::new(),
        &LossWeights::default(),
        &AdamWConfig::default(),
        0.0,
    )
    .unwrap();
    assert!(stats.grad_norm > 0.0);
    assert_eq!(model.params, before);
}

#[test]
fn gradients_reach_queries_and_encoder() {
    let model = SqsModel::init(tiny_model_config().unwrap(), 6).unwrap();
    let s = small_sample(6);
    let (g, loss, _) =
        sqs_core::pretrain::build_loss(&model, &s, &LossWeights::default(), &RenderSettings::default(), true).unwrap();
    let grads = g.backward(loss, &Array::scalar(1.0)).unwrap();
    for name in [
        "queries.anchors",
        "queries.features",
        "encoder.stem.w",
        "decoder.1.attn.out.w",
        "decoder.color.fc2.w",
    ] {
        assert!(grads.param(name).unwrap().norm() > 0.0, "{name}");
    }
}

#[test]
fn training_steps_reduce_loss() {
    let mut model = SqsModel::init(tiny_model_config().unwrap(), 7).unwrap();
    let s = small_sample(7);
    let w = LossWeights::default();
    let before = evaluate_loss(&model, &s, &w).unwrap();
    let mut state = OptimizerState::new();
    for _ in 0..20 {
        pretrain_step(&mut model, &s, &mut state, &w, &AdamWConfig::default(), 5e-3).unwrap();
    }
    assert!(evaluate_loss(&model, &s, &w).unwrap() < before);
}

#[test]
fn checkpoint_round_trip_keeps_optimizer_state() {
    let mut model = SqsModel::init(tiny_model_config().unwrap(), 8).unwrap();
    let s = small_sample(8);
    let mut state = OptimizerState::new();
    pretrain_step(
        &mut model,
        &s,
        &mut state,
        &LossWeights::default(),
        &AdamWConfig::default(),
        1e-3,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_training_checkpoint(&path, &model, &state).unwrap();
    let mut loaded = SqsModel::init(tiny_model_config().unwrap(), 99).unwrap();
    let st = load_training_checkpoint(&path, &mut loaded).unwrap().unwrap();
    assert_eq!(loaded.params, model.params);
    assert_eq!(st, state);
}
