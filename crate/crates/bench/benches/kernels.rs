use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ss3d_core::paths::enumerate_paths;
use ss3d_core::s6::{selective_scan, ScanKernel};
use ss3d_core::tensor::{conv3d, no_grad, Tensor};

fn random(r: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn scan_kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("selective_scan");
    let (ch, n) = (64, 16);
    for l in [64, 512, 4096] {
        let mut r = ChaCha8Rng::seed_from_u64(l as u64);
        let x = random(&mut r, &[l, ch], -1.0, 1.0);
        let delta = random(&mut r, &[l, ch], 1e-3, 0.5);
        let a = random(&mut r, &[ch, n], -4.0, -0.1);
        let b = random(&mut r, &[l, n], -1.0, 1.0);
        let cc = random(&mut r, &[l, n], -1.0, 1.0);
        let d = random(&mut r, &[ch], -1.0, 1.0);
        for (name, kernel) in [("sequential", ScanKernel::Sequential), ("parallel", ScanKernel::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, l), &l, |bench, _| {
                let _g = no_grad();
                bench.iter(|| selective_scan(&x, &delta, &a, &b, &cc, &d, kernel).unwrap())
            });
        }
    }
    group.finish();
}

fn paths(c: &mut Criterion) {
    let mut group = c.benchmark_group("enumerate_paths");
    for dims in [[3, 4, 5], [12, 12, 12]] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{dims:?}")), &dims, |bench, &dims| {
            bench.iter(|| enumerate_paths(black_box(dims)).unwrap())
        });
    }
    group.finish();
}

fn convolution(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut r, &[8, 32, 32, 32], -1.0, 1.0);
    let w = random(&mut r, &[8, 8, 3, 3, 3], -0.2, 0.2);
    let mut group = c.benchmark_group("conv3d_8x8_32cubed");
    group.sample_size(10);
    group.bench_function("forward", |bench| {
        let _g = no_grad();
        bench.iter(|| conv3d(&x, &w, None, 1, 1, 1).unwrap())
    });
    group.bench_function("forward_backward", |bench| {
        let wp = Tensor::param(&[8, 8, 3, 3, 3], w.to_vec()).unwrap();
        bench.iter(|| {
            wp.zero_grad();
            conv3d(&x, &wp, None, 1, 1, 1).unwrap().sum().backward().unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, scan_kernels, paths, convolution);
criterion_main!(benches);
