use criterion::{criterion_group, criterion_main, Criterion};
use sqs_bench::default_scene;
use sqs_core::encoder::encode;
use sqs_core::nn::Ctx;
use sqs_core::pretrain::{pretrain_step, AdamWConfig, LossWeights, OptimizerState};
use sqs_core::render::{render, render_reference, RenderSettings};
use sqs_core::{Graph, ModelConfig, SqsModel};

fn rendering(c: &mut Criterion) {
    let (scene, _) = default_scene(0);
    let cam = &scene.cameras[0];
    let s = RenderSettings::default();
    c.bench_function("render_tiled_64", |b| {
        b.iter(|| render(&scene.gaussians, cam, &s).unwrap())
    });
    c.bench_function("render_reference_64", |b| {
        b.iter(|| render_reference(&scene.gaussians, cam, &s).unwrap())
    });
}

fn encoding(c: &mut Criterion) {
    let (_, sample) = default_scene(1);
    let model = SqsModel::init(ModelConfig::default(), 0).unwrap();
    c.bench_function("encode_4x64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &model.params, false);
            encode(&mut ctx, &model.cfg.encoder, &sample.rgb).unwrap();
        })
    });
}

fn training(c: &mut Criterion) {
    let (_, sample) = default_scene(2);
    let mut model = SqsModel::init(ModelConfig::default(), 0).unwrap();
    let mut state = OptimizerState::new();
    let mut group = c.benchmark_group("pretrain");
    group.sample_size(10);
    group.bench_function("step_512_queries", |b| {
        b.iter(|| {
            pretrain_step(
                &mut model,
                &sample,
                &mut state,
                &LossWeights::default(),
                &AdamWConfig::default(),
                1e-5,
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, rendering, encoding, training);
criterion_main!(benches);
