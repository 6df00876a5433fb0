use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stoic_core::arch::{
    build_params, core_stack_materialized, embed_input, randomize_params, stoic_forward, ImageDims,
    StoicConfig, StreamingStack, StrideVariant,
};
use stoic_core::numerics::{conv2d, Tensor};

fn input(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        (0..n)
            .map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0)
            .collect(),
        shape,
    )
    .unwrap()
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("stoic_forward");
    for stride in [StrideVariant::S1, StrideVariant::S2] {
        let cfg = StoicConfig::new(stride, ImageDims::new(1, 8, 8), 64, 4);
        let params = build_params::<f32>(&cfg, 0).unwrap();
        let x = input(&[16, 1, 8, 8]);
        let t = vec![100; 16];
        group.bench_with_input(BenchmarkId::from_parameter(stride), &x, |b, x| {
            b.iter(|| stoic_forward(black_box(x), &t, None, &params, &cfg).unwrap())
        });
    }
    group.finish();
}

fn block_stack(c: &mut Criterion) {
    let cfg = StoicConfig::new(StrideVariant::S2, ImageDims::new(3, 16, 16), 64, 8);
    let params = randomize_params(&build_params::<f32>(&cfg, 0).unwrap(), 1, 0.05);
    let seq = embed_input(
        &input(&[4, 3, 16, 16]),
        &[10, 20, 30, 40],
        None,
        &params,
        &cfg,
    )
    .unwrap();
    let mut group = c.benchmark_group("core_stack");
    group.bench_function("materialized", |b| {
        b.iter(|| core_stack_materialized(black_box(&seq), &params, &cfg).unwrap())
    });
    let mut stream = StreamingStack::new(4, &cfg);
    group.bench_function("streaming", |b| {
        b.iter(|| {
            stream
                .run(black_box(&seq), &params, cfg.num_blocks)
                .unwrap()
        })
    });
    group.finish();
}

fn convolution(c: &mut Criterion) {
    let x = input(&[8, 16, 32, 32]);
    let w = input(&[32, 16, 3, 3]);
    let bias = input(&[32]);
    c.bench_function("conv2d_3x3_16to32_32x32", |b| {
        b.iter(|| conv2d(black_box(&x), &w, &bias, 1, 1).unwrap())
    });
}

criterion_group!(benches, forward, block_stack, convolution);
criterion_main!(benches);
