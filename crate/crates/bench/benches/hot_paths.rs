use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use voxsteer_core::data::{generate_records, DataConfig};
use voxsteer_core::eval::{chamfer, icp_align, IcpOptions};
use voxsteer_core::flow::{image_tokens, FlowModel, ModelConfig, Stage};
use voxsteer_core::sample::noise;
use voxsteer_core::train::{train_loop, LoopOptions, Phase, TrainConfig};
use voxsteer_core::voxel::{build_asset, sample_surface_points, SceneGraph, ViewImage};

fn data(pairs: usize) -> Vec<voxsteer_core::data::EditPairRecord> {
    let cfg = DataConfig { pairs, q: 0.0, seed: 5, ..DataConfig::default() };
    generate_records(&cfg).expect("records").records
}

fn forward(c: &mut Criterion) {
    let records = data(16);
    let mut model = FlowModel::init_base(ModelConfig::new(Stage::Geometry), 1).unwrap();
    model.init_control(2).unwrap();
    let cfg = model.config.clone();
    let images: Vec<&ViewImage> = records.iter().take(8).map(|r| &r.condition).collect();
    let b = images.len();
    let img = image_tokens::<f32>(&images, &cfg).unwrap();
    let x = noise(&[b, cfg.tokens(), cfg.latent_dim()], 3);
    let instr: Vec<_> = records.iter().take(b).map(|r| r.tokens).collect();
    let t = vec![0.5; b];
    c.bench_function("velocity_base_b8", |bench| {
        bench.iter(|| model.velocity_base(black_box(&x), &t, &img, None).unwrap())
    });
    c.bench_function("velocity_steered_b8", |bench| {
        bench.iter(|| model.velocity_steered(black_box(&x), &t, &img, None, &instr).unwrap())
    });
}

fn train_steps(c: &mut Criterion) {
    let records = data(64);
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("base_pretrain_geometry_5_steps", |bench| {
        bench.iter(|| {
            let mut tc = TrainConfig::new(Phase::BasePretrain, Stage::Geometry);
            tc.steps = 5;
            tc.val_every = 0;
            train_loop(&tc, &records, LoopOptions::default()).unwrap()
        })
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let a = build_asset(&SceneGraph::generate(11), 16).unwrap();
    let b = build_asset(&SceneGraph::generate(12), 16).unwrap();
    let pa = sample_surface_points(&a, 1024, 1).unwrap();
    let pb = sample_surface_points(&b, 1024, 2).unwrap();
    c.bench_function("chamfer_1024", |bench| bench.iter(|| chamfer(black_box(&pa), black_box(&pb)).unwrap()));
    let mut group = c.benchmark_group("icp");
    group.sample_size(10);
    group.bench_function("icp_align_1024", |bench| {
        bench.iter(|| icp_align(black_box(&pa), black_box(&pb), &IcpOptions::default()).unwrap())
    });
    group.finish();
}

fn generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("data");
    group.sample_size(10);
    group.bench_function("generate_64_pairs", |bench| bench.iter(|| data(black_box(64))));
    group.finish();
}

criterion_group!(benches, forward, train_steps, metrics, generation);
criterion_main!(benches);
