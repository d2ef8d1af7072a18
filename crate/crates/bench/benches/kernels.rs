use arclab::kernel::{matmul, svd};
use arclab::Rng;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    let mut rng = Rng::new(0);
    for n in [16, 64, 128] {
        let a = rng.normal_matrix(n, n, 1.0);
        let b = rng.normal_matrix(n, n, 1.0);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn bench_svd(c: &mut Criterion) {
    let mut g = c.benchmark_group("svd");
    let mut rng = Rng::new(1);
    for n in [8, 16, 32] {
        let a = rng.normal_matrix(n, n, 1.0);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| bch.iter(|| svd(black_box(&a)).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_svd);
criterion_main!(benches);
