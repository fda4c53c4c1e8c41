mod common;

use proptest::prelude::*;
use rand::Rng;
use sqs_core::autodiff::{Array, Graph};
use sqs_core::finetune::{
    evaluate_iou, filter_by_opacity, finetune_step, init_interaction, knn_neighbors, local_query_interaction,
    occupancy_head, prepare_examples, run_finetune, FilteredAnchors, FinetuneConfig, InteractionConfig, TaskConfig,
    TaskModel, ANCHOR_VEC_DIM,
};
use sqs_core::nn::{Ctx, ParamStore};
use sqs_core::pretrain::{save_training_checkpoint, AdamWConfig, OptimizerState};
use sqs_core::scene::{bake_ground_truth, generate_scene, Bounds, SceneSpec};
use sqs_core::verify::tiny_model_config;
use sqs_core::SqsModel;

fn anchors_with_opacity(op: &[f64]) -> Array {
    let mut d = Vec::new();
    for (i, &o) in op.iter().enumerate() {
        d.extend([i as f64, 0.0, 0.0, 0.1, 0.1, 0.1, 1.0, 0.0, 0.0, 0.0, o]);
    }
    Array::matrix(op.len(), ANCHOR_VEC_DIM, d)
}

#[test]
fn opacity_filter_examples() {
    let op = [0.01, 0.5, 0.04, 0.9];
    let p = anchors_with_opacity(&op);
    let f = Array::matrix(4, 2, (0..8).map(f64::from).collect());
    assert_eq!(filter_by_opacity(&p, &f, 0.05).unwrap().indices, vec![1, 3]);
    assert_eq!(filter_by_opacity(&p, &f, 0.0).unwrap().len(), 4);
    let none = filter_by_opacity(&p, &f, 1.0).unwrap();
    assert!(none.is_empty());
    assert_eq!(none.features.shape(), &[0, 2]);
    let kept = filter_by_opacity(&p, &f, 0.05).unwrap();
    assert_eq!(kept.features.row(1), &[6.0, 7.0]);
}

proptest! {
    #[test]
    fn higher_threshold_keeps_a_subset(op in proptest::collection::vec(0.0..1.0f64, 1..50), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let p = anchors_with_opacity(&op);
        let f = Array::zeros(&[op.len(), 1]);
        let small = filter_by_opacity(&p, &f, hi).unwrap().indices;
        let large = filter_by_opacity(&p, &f, lo).unwrap().indices;
        prop_assert!(small.iter().all(|i| large.contains(i)));
    }

    #[test]
    fn knn_matches_full_sort(seed in any::<u64>(), n in 1usize..1000, k in 1usize..9) {
        let mut r = common::rng(seed);
        let mut pts = |m: usize| Array::matrix(m, 3, (0..m * 3).map(|_| r.random_range(-1.0..1.0)).collect());
        let anchors = pts(n);
        let task = pts(6);
        let got = knn_neighbors(&task, &anchors, k).unwrap();
        for t in 0..task.rows() {
            let mut all: Vec<(f64, usize)> = (0..n)
                .map(|a| {
                    let d: f64 = (0..3).map(|c| (task.get(t, c) - anchors.get(a, c)).powi(2)).sum();
                    (d, a)
                })
                .collect();
            all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let mut want: Vec<usize> = all.iter().take(k).map(|e| e.1).collect();
            while want.len() < k {
                want.push(all[0].1);
            }
            prop_assert_eq!(&got[t * k..(t + 1) * k], &want[..]);
        }
    }
}

#[test]
fn knn_examples() {
    let one = Array::from_rows(&[&[5.0, 5.0, 5.0]]);
    let task = Array::from_rows(&[&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]]);
    assert_eq!(knn_neighbors(&task, &one, 3).unwrap(), vec![0; 6]);
    let three = Array::from_rows(&[&[0.0, 3.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, -2.0]]);
    let origin = Array::from_rows(&[&[0.0, 0.0, 0.0]]);
    assert_eq!(knn_neighbors(&origin, &three, 2).unwrap(), vec![1, 2]);
    assert!(knn_neighbors(&origin, &Array::zeros(&[0, 3]), 2).is_err());
}

fn interaction_setup(k: usize, n: usize, seed: u64) -> (TaskConfig, ParamStore, Array, FilteredAnchors, Array) {
    let cfg = TaskConfig {
        grid: 2,
        d_task: 4,
        hidden: 4,
        d_pretrained: 3,
        interaction: true,
        inter: InteractionConfig {
            k,
            alpha_thresh: 0.05,
            pe_hidden: 5,
        },
    };
    let mut r = common::rng(seed);
    let mut store = ParamStore::new();
    init_interaction(&mut store, &cfg, &mut r);
    let positions = Array::matrix(8, 3, (0..24).map(|_| r.random_range(-1.0..1.0)).collect());
    let mut p = Vec::new();
    for _ in 0..n {
        p.extend((0..ANCHOR_VEC_DIM).map(|_| r.random_range(-1.0..1.0)));
    }
    let gq = FilteredAnchors {
        params: Array::matrix(n, ANCHOR_VEC_DIM, p),
        features: Array::matrix(n, 3, (0..n * 3).map(|_| r.random_range(-1.0..1.0)).collect()),
        indices: (0..n).collect(),
        neighbors: None,
    };
    let x = Array::matrix(8, 4, (0..32).map(|_| r.random_range(-1.0..1.0)).collect());
    (cfg, store, positions, gq, x)
}

/// `out(v(q_k + pe_anchor(g_k)))` for every anchor, built from plain layers.
fn projected_values(store: &ParamStore, gq: &FilteredAnchors) -> Array {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, false);
    let gk = ctx.g.constant(gq.params.clone()).unwrap();
    let qk = ctx.g.constant(gq.features.clone()).unwrap();
    let pe = ctx.mlp2(gk, "interact.pe_anchor").unwrap();
    let kv = ctx.g.add(qk, pe).unwrap();
    let v = ctx.linear(kv, "interact.v").unwrap();
    let w = ctx.p("interact.out.w").unwrap();
    let o = ctx.g.matmul(v, w).unwrap();
    g.value(o).clone()
}

fn interact(store: &ParamStore, x: &Array, positions: &Array, gq: &FilteredAnchors, cfg: &TaskConfig) -> Array {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, false);
    let xn = ctx.g.constant(x.clone()).unwrap();
    let out = local_query_interaction(&mut ctx, xn, positions, gq, cfg).unwrap();
    g.value(out).clone()
}

#[test]
fn single_neighbor_passes_its_value_through() {
    let (cfg, store, positions, gq, x) = interaction_setup(1, 6, 1);
    let got = interact(&store, &x, &positions, &gq, &cfg);
    let nbr = knn_neighbors(&positions, &gq.positions(), 1).unwrap();
    let v = projected_values(&store, &gq);
    let b = store.get("interact.out.b").unwrap();
    for t in 0..8 {
        for c in 0..4 {
            let want = x.get(t, c) + v.get(nbr[t], c) + b.data()[c];
            assert!((got.get(t, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_average_the_neighbors() {
    let (cfg, mut store, positions, gq, x) = interaction_setup(3, 6, 2);
    store.insert("interact.k.w", Array::zeros(&[3, 4]));
    let got = interact(&store, &x, &positions, &gq, &cfg);
    let nbr = knn_neighbors(&positions, &gq.positions(), 3).unwrap();
    let v = projected_values(&store, &gq);
    let b = store.get("interact.out.b").unwrap();
    for t in 0..8 {
        for c in 0..4 {
            let mean: f64 = nbr[t * 3..t * 3 + 3].iter().map(|&j| v.get(j, c)).sum::<f64>() / 3.0;
            assert!((got.get(t, c) - (x.get(t, c) + mean + b.data()[c])).abs() < 1e-12);
        }
    }
}

#[test]
fn no_anchors_leaves_queries_unchanged() {
    let (cfg, store, positions, _, x) = interaction_setup(2, 4, 3);
    let empty = FilteredAnchors {
        params: Array::zeros(&[0, ANCHOR_VEC_DIM]),
        features: Array::zeros(&[0, 3]),
        indices: vec![],
        neighbors: None,
    };
    assert_eq!(interact(&store, &x, &positions, &empty, &cfg), x);
}

#[test]
fn zero_head_gives_uniform_logits() {
    let mut store = ParamStore::new();
    for (n, s) in [
        ("task.head.fc1.w", [4, 6]),
        ("task.head.fc1.b", [1, 6]),
        ("task.head.fc2.w", [6, 2]),
        ("task.head.fc2.b", [1, 2]),
    ] {
        store.insert(n, Array::zeros(&s));
    }
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, false);
    let f = ctx.g.constant(Array::full(&[5, 4], 0.7)).unwrap();
    let logits = occupancy_head(&mut ctx, f).unwrap();
    assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
}

#[test]
fn iou_examples() {
    let r = evaluate_iou(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
    assert_eq!(r.miou, 1.0);
    let r = evaluate_iou(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(r.miou, 0.0);
    let r = evaluate_iou(&[1, 1, 0, 0], &[0, 1, 1, 0], 2).unwrap();
    assert!((r.occupied() - 1.0 / 3.0).abs() < 1e-15);
    assert!(evaluate_iou(&[0], &[0, 1], 2).is_err());
}

fn small_scenes(n: u64) -> Vec<(sqs_core::Scene, sqs_core::SceneSample)> {
    let spec = SceneSpec {
        bounds: Bounds::cube(1.0).unwrap(),
        n_views: 2,
        image_size: (32, 32),
        n_objects: 3,
        gaussians_per_object: 10,
        focal: 30.0,
        ..SceneSpec::default()
    };
    (0..n)
        .map(|s| {
            let scene = generate_scene(&spec, s).unwrap();
            let sample = bake_ground_truth(&scene).unwrap();
            (scene, sample)
        })
        .collect()
}

fn small_task_cfg() -> TaskConfig {
    TaskConfig {
        grid: 4,
        d_task: 8,
        hidden: 8,
        inter: InteractionConfig {
            k: 4,
            alpha_thresh: 0.0,
            pe_hidden: 8,
        },
        ..TaskConfig::default()
    }
}

#[test]
fn pretrained_checkpoint_survives_finetuning() {
    let model = SqsModel::init(tiny_model_config().unwrap(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("pre.ckpt");
    save_training_checkpoint(&ckpt, &model, &OptimizerState::new()).unwrap();
    let before = std::fs::read(&ckpt).unwrap();
    let cfg = small_task_cfg();
    let mut task = TaskModel::init(cfg.clone(), &model, 2).unwrap();
    let examples = prepare_examples(&model, &small_scenes(2), &cfg).unwrap();
    let fc = FinetuneConfig {
        steps: 100,
        ..FinetuneConfig::default()
    };
    let out = run_finetune(&mut task, &examples, &fc, dir.path()).unwrap();
    assert_eq!(out.stats.len(), 100);
    assert_eq!(std::fs::read(&ckpt).unwrap(), before);
    assert_ne!(
        task.params.get("encoder.stem.w").unwrap(),
        model.params.get("encoder.stem.w").unwrap()
    );
}

#[test]
fn zero_lr_keeps_loss_constant() {
    let model = SqsModel::init(tiny_model_config().unwrap(), 3).unwrap();
    let cfg = small_task_cfg();
    let mut task = TaskModel::init(cfg.clone(), &model, 4).unwrap();
    let ex = prepare_examples(&model, &small_scenes(1), &cfg).unwrap().remove(0);
    let mut state = OptimizerState::new();
    let losses: Vec<f64> = (0..4)
        .map(|_| {
            finetune_step(
                &mut task,
                &ex.sample,
                ex.anchors.as_ref(),
                &ex.labels,
                &mut state,
                &AdamWConfig::default(),
                0.0,
            )
            .unwrap()
            .loss
        })
        .collect();
    assert!(losses.iter().all(|&l| l == losses[0]), "{losses:?}");
}

#[test]
fn task_init_is_deterministic_per_seed() {
    let model = SqsModel::init(tiny_model_config().unwrap(), 5).unwrap();
    let cfg = small_task_cfg();
    let a = TaskModel::init(cfg.clone(), &model, 6).unwrap();
    assert_eq!(a, TaskModel::init(cfg.clone(), &model, 6).unwrap());
    assert_ne!(a, TaskModel::init(cfg, &model, 7).unwrap());
}
