use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use kernel_warehouse::manifest::{dyconv_attention, GroupDef, LayerDef, ModelManifest};
use kernel_warehouse::ops::conv2d_forward_exec;
use kernel_warehouse::tensor::Tensor4;
use kernel_warehouse::{build_model, Exec, ModelGraph};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn toy() -> ModelManifest {
    let layer = |id: &str, c, f, stride, binding: &str| LayerDef {
        id: id.into(),
        k: 3,
        c,
        f,
        stride,
        pad: 1,
        binding: binding.parse().unwrap(),
        input: None,
        residual: None,
        relu: true,
        norm: true,
    };
    ModelManifest {
        classes: 10,
        layers: vec![
            layer("stem", 3, 16, 1, "plain"),
            layer("kw1", 16, 16, 1, "w"),
            layer("kw2", 16, 32, 2, "w"),
            layer("kw3", 32, 32, 2, "w"),
        ],
        groups: vec![GroupDef::new("w", "1")],
        dyconv: dyconv_attention(),
    }
}

fn input(n: usize, c: usize, hw: usize) -> Tensor4<f32> {
    Tensor4::from_fn([n, c, hw, hw], |[a, b, y, x]| {
        ((a * 31 + b * 7 + y * 3 + x) % 17) as f32 / 17.0 - 0.5
    })
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_forward");
    let x = input(32, 16, 16);
    let k = Tensor4::from_fn([32, 16, 3, 3], |[a, b, y, z]| ((a + b + y + z) % 5) as f32 * 0.1);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, 32), &exec, |b, &exec| {
            b.iter(|| conv2d_forward_exec(black_box(&x), &k, 1, 1, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_step(c: &mut Criterion) {
    let graph: ModelGraph<f32> = build_model(&toy(), 0).unwrap();
    let labels: Vec<usize> = (0..32).map(|i| i % 10).collect();
    let x = input(32, 3, 16);
    let mut group = c.benchmark_group("toy_forward_backward");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, 32), &exec, |b, &exec| {
            b.iter(|| graph.loss_and_grads(black_box(&x), &labels, 0.5, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_step);
criterion_main!(benches);
