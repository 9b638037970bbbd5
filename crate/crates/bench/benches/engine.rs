use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use instanseg_core::kernels::{conv2d_bwd, conv2d_fwd, gemm_nn};
use instanseg_core::labelmap::boundary_distance;
use instanseg_core::losses::lovasz_hinge_with_grad;
use instanseg_core::pipeline::{analytic_bundle, infer_with};
use instanseg_core::synth::gen_sample;
use instanseg_core::{PipelineConfig, SynthConfig};

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut s = seed;
    (0..len)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect()
}

fn conv_layers(c: &mut Criterion) {
    let (n, ic, oc, h, w) = (3, 16, 16, 128, 128);
    let x = noise(n * ic * h * w, 1);
    let weight = noise(oc * ic * 9, 2);
    let bias = noise(oc, 3);
    let dout = noise(n * oc * h * w, 4);
    c.bench_function("conv3x3 forward 3x16x128x128", |b| {
        b.iter(|| conv2d_fwd(black_box(&x), (n, ic, h, w), &weight, (oc, ic, 3), &bias))
    });
    c.bench_function("conv3x3 backward 3x16x128x128", |b| {
        b.iter(|| conv2d_bwd(black_box(&x), (n, ic, h, w), &weight, (oc, ic, 3), &dout, true))
    });
}

fn gemm(c: &mut Criterion) {
    let (m, k, n) = (16, 144, 128 * 128);
    let a = noise(m * k, 5);
    let b_mat = noise(k * n, 6);
    c.bench_function("gemm 16x144x16384", |b| {
        b.iter(|| {
            let mut out = vec![0.0; m * n];
            gemm_nn(m, k, n, black_box(&a), &b_mat, &mut out);
            out
        })
    });
}

fn lovasz(c: &mut Criterion) {
    let n = 128 * 128;
    let logits = noise(n, 7);
    let labels: Vec<f64> = noise(n, 8).iter().map(|v| if *v > 0.0 { 1.0 } else { -1.0 }).collect();
    c.bench_function("lovasz hinge 16384 px", |b| {
        b.iter(|| lovasz_hinge_with_grad(black_box(&logits), &labels))
    });
}

fn distance_transform(c: &mut Criterion) {
    let synth = SynthConfig { size: 512, count_min: 60, count_max: 90, ..Default::default() };
    let labels = gen_sample(&synth, 0).unwrap().1;
    c.bench_function("boundary distance 512x512", |b| {
        b.iter(|| boundary_distance(black_box(&labels)))
    });
}

fn fixture_inference(c: &mut Criterion) {
    let synth = SynthConfig { size: 256, count_min: 25, count_max: 40, ..Default::default() };
    let labels = gen_sample(&synth, 0).unwrap().1;
    let (bundle, params) = analytic_bundle(&labels, 2, 1).unwrap();
    let cfg = PipelineConfig { crop_size: 64, ..Default::default() };
    c.bench_function("fixture inference 256x256", |b| {
        b.iter(|| infer_with(black_box(&bundle), &params, &cfg).unwrap())
    });
}

criterion_group!(benches, conv_layers, gemm, lovasz, distance_transform, fixture_inference);
criterion_main!(benches);
