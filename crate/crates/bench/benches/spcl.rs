use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use std::hint::black_box;

use spcl::flops::spcl_step_cost;
use spcl::partition::sample_partition;
use spcl::rng::{Purpose, StreamRng};
use spcl::trainer::{fresh_state, train_step};
use spcl::tsp_loss::{batch_loss_value, LossParams, Pairing};
use spcl::{Encoder, EncoderConfig, TrainConfig};
use spcl_bench::{desk_encoder, synthetic_images, unit_rows};

fn loss(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_loss_value");
    for n in [8, 32, 128] {
        let z = unit_rows(2 * n, 64, 1);
        let pairing = Pairing::adjacent(n).unwrap();
        let params = LossParams::default();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| batch_loss_value(black_box(&z), &pairing, &params).unwrap())
        });
    }
    group.finish();
}

fn partition(c: &mut Criterion) {
    c.bench_function("sample_partition/196@0.6", |b| {
        let mut rng = StreamRng::new(0, Purpose::Partition, 0);
        b.iter(|| sample_partition(black_box(196), 0.6, &mut rng).unwrap())
    });
}

fn encoder(c: &mut Criterion) {
    let (cfg, params) = desk_encoder();
    let enc = Encoder::new(cfg).unwrap();
    let img = synthetic_images(1).remove(0);
    c.bench_function("embed_image/desk", |b| b.iter(|| enc.embed_image(&params, black_box(&img)).unwrap()));
}

fn step(c: &mut Criterion) {
    let images = synthetic_images(8);
    let cfg = TrainConfig { batch_size: 8, ..TrainConfig::default() };
    let state = fresh_state(EncoderConfig::default(), cfg, images.len()).unwrap();
    let enc = Encoder::new(state.encoder.clone()).unwrap();
    let batch: Vec<_> = images.iter().collect();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("desk/8", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| train_step(&enc, &mut s, std::slice::from_ref(&batch)).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn flops(c: &mut Criterion) {
    let cfg = EncoderConfig::vit_base(224);
    c.bench_function("spcl_step_cost/vit_base", |b| b.iter(|| spcl_step_cost(black_box(&cfg), 0.6).unwrap()));
}

criterion_group!(benches, loss, partition, encoder, step, flops);
criterion_main!(benches);
