use std::hint::black_box;

use alhp::exec::force_sequential;
use alhp::harness::synth::{gen_data, SynthConfig};
use alhp::trainer::{Mode, RunState, TrainConfig, TrainData};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn setup() -> (tempfile::TempDir, RunState<f32>, TrainData<f32>) {
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = SynthConfig {
        places: 16,
        variants: 3,
        resolution: 64,
        seed: 1,
    };
    gen_data(&cfg, dir.path()).unwrap();
    let mut tc = TrainConfig {
        mode: Mode::Baseline,
        data: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    tc.net.resolution = 64;
    let data = TrainData::load(dir.path(), tc.radius, 64).unwrap();
    (dir, RunState::new(tc).unwrap(), data)
}

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn describe(c: &mut Criterion) {
    let (_dir, state, data) = setup();
    let mut g = c.benchmark_group("describe_48_images");
    g.sample_size(10);
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            force_sequential(seq);
            b.iter(|| black_box(state.net.describe_all(&data.clean).unwrap()));
        });
    }
    force_sequential(false);
    g.finish();
}

fn tuple_gradient(c: &mut Criterion) {
    let (_dir, state, data) = setup();
    let tuples = state.mine_epoch(&data, None).unwrap();
    let query = &data.clean[tuples[0].query];
    let mut g = c.benchmark_group("tuple_loss_and_gradient");
    g.sample_size(10);
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            force_sequential(seq);
            b.iter(|| black_box(state.tuple_loss(&data, &tuples[0], query).unwrap().total));
        });
    }
    force_sequential(false);
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let (_dir, state, data) = setup();
    let tuples = state.mine_epoch(&data, None).unwrap();
    let mut g = c.benchmark_group("train_step_d5");
    g.sample_size(10);
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            force_sequential(seq);
            let mut s = state.clone();
            b.iter(|| black_box(s.train_step(&data, &tuples[0], 1).unwrap().mean_loss));
        });
    }
    force_sequential(false);
    g.finish();
}

criterion_group!(benches, describe, tuple_gradient, train_step);
criterion_main!(benches);
