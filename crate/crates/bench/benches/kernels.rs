use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use sctfusion_core::losses::{perceptual_grad, ssim_grad, SsimParams};
use sctfusion_core::nn::{conv_forward, ConvGeom};
use sctfusion_core::rng::derive_seed;
use sctfusion_core::unet::{backward, Mode};
use sctfusion_core::{apply_affine, build_model, forward, sample_affine, FeatureExtractor, MisalignmentSpec, ModelConfig, Tensor, Volume, Domain};

fn values(seed: u64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (derive_seed(seed, &[i as u64]) >> 11) as f64 / (1u64 << 53) as f64).collect()
}

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::new(shape.to_vec(), values(seed, shape.iter().product())).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d_forward");
    for (cin, cout, s) in [(1, 4, 32), (4, 8, 16), (16, 32, 8)] {
        let g = ConvGeom {
            n: 1,
            cin,
            cout,
            size: [s; 3],
            kernel: [3; 3],
        };
        let x = values(1, cin * s * s * s);
        let w = values(2, cout * cin * 27);
        let b = vec![0.0; cout];
        let mut y = vec![0.0; cout * s * s * s];
        group.throughput(Throughput::Elements((2 * 27 * cin * cout * s * s * s) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(format!("{cin}x{cout}@{s}")), &g, |bench, g| {
            bench.iter(|| conv_forward(black_box(&x), &w, &b, g, &mut y))
        });
    }
    group.finish();
}

fn unet(c: &mut Criterion) {
    let weights = build_model(&ModelConfig::tiny(2), 0).unwrap();
    let x = tensor(&[1, 2, 32, 32, 32], 3);
    c.bench_function("tiny_unet_forward_32", |b| b.iter(|| forward(&weights, black_box(&x), Mode::Eval).unwrap()));
    let (y, trace) = forward(&weights, &x, Mode::Train).unwrap();
    let gy = Tensor::full(y.shape(), 1e-3);
    c.bench_function("tiny_unet_backward_32", |b| b.iter(|| backward(&weights, &trace, black_box(&gy)).unwrap()));
}

fn losses(c: &mut Criterion) {
    let a = tensor(&[1, 1, 32, 32, 32], 4);
    let t = tensor(&[1, 1, 32, 32, 32], 5);
    let p = SsimParams::default();
    c.bench_function("ssim_grad_32", |b| b.iter(|| ssim_grad(black_box(&a), &t, &p).unwrap()));
    let ext = FeatureExtractor::seeded_random(0, 8).unwrap();
    c.bench_function("perceptual_grad_32", |b| b.iter(|| perceptual_grad(black_box(&a), &t, &ext).unwrap()));
}

fn misalign(c: &mut Criterion) {
    let v = Volume::from_fn([64; 3], [1.6; 3], Domain::Normalized, |d, h, w| ((d * 7 + h * 3 + w) % 11) as f32 / 10.0).unwrap();
    let params = sample_affine(&MisalignmentSpec::new(1.0, 9).unwrap()).unwrap();
    c.bench_function("apply_affine_64", |b| b.iter(|| apply_affine(black_box(&v), &params).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, unet, losses, misalign
}
criterion_main!(benches);
