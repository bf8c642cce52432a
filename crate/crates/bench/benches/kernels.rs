use std::hint::black_box;

use adaflow_core::ensemble::{init_ensemble, EnsembleConfig, UpdateInterval};
use adaflow_core::losses::MuWeights;
use adaflow_core::metrics::ssim;
use adaflow_core::networks::{predict, ArchConfig, PredictionParams, WeightNetParams};
use adaflow_core::tensor::{conv2d, AdamConfig, Tensor};
use adaflow_core::warping::warp;
use adaflow_core::Frame;
use criterion::{criterion_group, criterion_main, Criterion};

fn pattern(h: usize, w: usize, phase: f32) -> Frame {
    Frame::from_fn(h, w, |c, y, x| {
        0.5 + 0.4 * ((x as f32 + phase) * 0.3 + y as f32 * 0.2 + c as f32).sin()
    })
}

fn values(n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|i| scale * ((i * 7919 % 101) as f32 / 50.0 - 1.0)).collect()
}

fn bench_conv(c: &mut Criterion) {
    let x = Tensor::new(values(16 * 64 * 64, 1.0), &[16, 64, 64]).unwrap();
    let k = Tensor::new(values(32 * 16 * 9, 0.1), &[32, 16, 3, 3]).unwrap();
    let b = Tensor::zeros(&[32]);
    c.bench_function("conv2d 16->32 3x3 64x64", |bn| {
        bn.iter(|| conv2d(black_box(&x), &k, &b, 1, 1).unwrap())
    });
    let xg = Tensor::param(values(16 * 64 * 64, 1.0), &[16, 64, 64]).unwrap();
    let kg = Tensor::param(values(32 * 16 * 9, 0.1), &[32, 16, 3, 3]).unwrap();
    c.bench_function("conv2d forward+backward 64x64", |bn| {
        bn.iter(|| conv2d(&xg, &kg, &b, 1, 1).unwrap().sum().backward().unwrap())
    });
}

fn bench_warp(c: &mut Criterion) {
    let f = pattern(64, 64, 0.0).to_tensor::<f32>();
    let flow = Tensor::new(values(2 * 64 * 64, 3.0), &[2, 64, 64]).unwrap();
    c.bench_function("warp 3x64x64", |bn| bn.iter(|| warp(black_box(&f), &flow).unwrap()));
}

fn bench_ssim(c: &mut Criterion) {
    let (a, b) = (pattern(64, 64, 0.0), pattern(64, 64, 1.0));
    c.bench_function("ssim 3x64x64", |bn| bn.iter(|| ssim(black_box(&a), &b).unwrap()));
}

fn desk_arch() -> ArchConfig {
    ArchConfig {
        edvf_depth: 3,
        edvf_base: 8,
        refine_depth: 2,
        refine_base: 8,
        weight_depth: 2,
        weight_base: 4,
        max_disp: 8.0,
    }
}

fn bench_predict(c: &mut Criterion) {
    let arch = desk_arch();
    let params = PredictionParams::<f32>::init(&arch, 0);
    let leaves = params.leaves(false);
    let (x0, x1) = (pattern(64, 64, 0.0).to_tensor(), pattern(64, 64, 1.0).to_tensor());
    c.bench_function("predict 64x64", |bn| {
        bn.iter(|| predict(black_box(&x1), &x0, &leaves, &arch).unwrap())
    });

    let cfg = EnsembleConfig {
        arch,
        k: 1,
        update_interval: UpdateInterval::Every(1),
        lambda_c: 0.1,
        mu_online: MuWeights::ONLINE,
        optimizer: AdamConfig::default(),
    };
    let mut state = init_ensemble(params.clone(), WeightNetParams::init(&arch, 1), cfg).unwrap();
    let frames: Vec<Frame> = (0..3).map(|t| pattern(64, 64, t as f32)).collect();
    c.bench_function("online update 64x64", |bn| {
        bn.iter(|| state.online_update(&frames[0], &frames[1], &frames[2]).unwrap())
    });
}

criterion_group!(benches, bench_conv, bench_warp, bench_ssim, bench_predict);
criterion_main!(benches);
