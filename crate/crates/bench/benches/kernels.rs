use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dsseg_core::autodiff::kernels::{conv3d_backward, conv3d_forward, maxpool3d_forward, Vol};
use dsseg_core::networks::{build_model_with, forward_train, predict_lesion, ArchSpec, Init, Variant};
use dsseg_core::{Graph, Tensor};

fn ramp(n: usize) -> Vec<f32> {
    (0..n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5).collect()
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d_k3");
    for &(ch, n) in &[(4usize, 32usize), (8, 16), (16, 8)] {
        let xv = Vol { c: ch, d: n, h: n, w: n };
        let yv = Vol { c: ch, ..xv };
        let x = ramp(xv.len());
        let w = ramp(ch * ch * 27);
        let b = vec![0.0f32; ch];
        let gy = ramp(yv.len());
        let id = format!("{ch}x{n}^3");
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |bch, _| {
            bch.iter(|| conv3d_forward(black_box(&x), xv, &w, 3, &b, yv, 1, 1))
        });
        group.bench_with_input(BenchmarkId::new("backward", &id), &(), |bch, _| {
            bch.iter(|| conv3d_backward(black_box(&x), xv, &w, 3, &gy, yv, 1, 1))
        });
    }
    group.finish();

    let xv = Vol { c: 8, d: 32, h: 32, w: 32 };
    let yv = Vol { c: 8, d: 16, h: 16, w: 16 };
    let x = ramp(xv.len());
    c.bench_function("maxpool3d_8x32^3", |bch| bch.iter(|| maxpool3d_forward(black_box(&x), xv, 2, 2, yv)));
}

fn network(c: &mut Criterion) {
    let spec = ArchSpec {
        base_channels: 4,
        stages: 4,
        patch_extent: 32,
        n_domains: 12,
        reg_hidden: (32, 16),
        ..ArchSpec::default()
    };
    let model = build_model_with::<f32>(&spec, Variant::Du, 0, Init::He).unwrap();
    let d = spec.patch_extent;
    let patch = Tensor::new(vec![spec.in_channels, d, d, d], ramp(spec.in_channels * d * d * d)).unwrap();
    let mut group = c.benchmark_group("unet_b4_s4_32^3");
    group.sample_size(10);
    group.bench_function("predict", |bch| bch.iter(|| predict_lesion(&model, black_box(&patch)).unwrap()));
    group.bench_function("forward_backward", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(patch.clone());
            let fwd = forward_train(&mut g, &model, &bound, x, None).unwrap();
            let lesion = g.select(fwd.seg, 1).unwrap();
            let loss = g.mean(lesion);
            g.backward(loss).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, conv, network);
criterion_main!(benches);
