use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mkpn::bench::random_inputs;
use mkpn::kernels::local_conv;
use mkpn::model::forward;
use mkpn::ops::{conv2d, conv2d_backward};
use mkpn::{init_weights, reconstruct_inference, reconstruct_training, ModelConfig};
use mkpn_bench::{pattern, pattern64};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let x = pattern(&[64, 64, 32], 0.0);
    let w = pattern(&[3, 3, 32, 32], 1.0);
    let b = pattern(&[32], 2.0);
    let dy = pattern(&[64, 64, 32], 3.0);
    c.bench_function("conv2d 64x64x32->32", |bch| {
        bch.iter(|| conv2d(black_box(&x), &w, &b).unwrap())
    });
    c.bench_function("conv2d backward 64x64x32->32", |bch| {
        bch.iter(|| conv2d_backward(black_box(&x), &w, &b, &dy).unwrap())
    });
}

fn local(c: &mut Criterion) {
    let mut g = c.benchmark_group("local_conv 64x64");
    for s in [3, 5, 11] {
        let frame = pattern64(&[64, 64], 0.5);
        let k = pattern64(&[64, 64, s, s], 1.5);
        g.bench_with_input(BenchmarkId::from_parameter(s), &s, |bch, _| {
            bch.iter(|| local_conv(black_box(&frame), &k).unwrap())
        });
    }
    g.finish();
}

fn reconstruction(c: &mut Criterion) {
    let mut g = c.benchmark_group("reconstruction 64x64 N=8");
    g.sample_size(20);
    for sizes in [vec![1, 3, 5], vec![5, 11], vec![1, 3, 5, 7, 9, 11]] {
        let label = sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        let (burst, field) = random_inputs(64, 8, &sizes, 7).unwrap();
        g.bench_function(BenchmarkId::new("naive", &label), |bch| {
            bch.iter(|| reconstruct_training(black_box(&burst), &field).unwrap())
        });
        g.bench_function(BenchmarkId::new("fused", &label), |bch| {
            bch.iter(|| reconstruct_inference(black_box(&burst), &field).unwrap())
        });
    }
    g.finish();
}

fn network(c: &mut Criterion) {
    let config = ModelConfig::new(8, &[1, 3, 5], &[16, 32, 64]).unwrap();
    let ckpt = init_weights::<f32>(&config, 0).unwrap();
    let x = pattern(&[64, 64, 9], 0.25);
    let mut g = c.benchmark_group("network");
    g.sample_size(20);
    g.bench_function("forward 64x64 widths 16,32,64", |bch| {
        bch.iter(|| forward(&ckpt, black_box(&x)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, conv, local, reconstruction, network);
criterion_main!(benches);
