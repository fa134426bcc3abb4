//! Kernel assembly, matrix-free products and per-example gradients on a
//! single-thread pool versus the default pool. Building with
//! `--no-default-features` benchmarks the sequential fallback instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::{ThreadPool, ThreadPoolBuilder};

use kdlab::distill::loss::{LossKind, LossTargets};
use kdlab::model::{self, Activation, Checkpoint, MlpSpec};
use kdlab::{ntk, rng};

fn pools() -> Vec<(&'static str, ThreadPool)> {
    vec![
        ("1-thread", ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("default", ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn setup(batch: usize) -> (Checkpoint, Vec<Vec<f64>>) {
    let c = model::init(&MlpSpec::new(vec![16, 128, 128, 4], Activation::Relu, 1)).unwrap();
    let mut r = rng::seeded(2);
    let xs = (0..batch).map(|_| rng::normal_vec(&mut r, 16)).collect();
    (c, xs)
}

fn bench_batch_kernel(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_kernel");
    for batch in [16, 64] {
        let (net, xs) = setup(batch);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        for (name, pool) in pools() {
            group.bench_with_input(BenchmarkId::new(name, batch), &refs, |b, refs| {
                b.iter(|| pool.install(|| ntk::batch_kernel(&net, refs).unwrap()))
            });
        }
    }
    group.finish();
}

fn bench_kernel_vec_product(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernel_vec_product");
    for batch in [64, 256] {
        let (net, xs) = setup(batch);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let v = rng::normal_vec(&mut rng::seeded(3), batch * net.output_dim());
        for (name, pool) in pools() {
            group.bench_with_input(BenchmarkId::new(name, batch), &refs, |b, refs| {
                b.iter(|| pool.install(|| ntk::kernel_vec_product(&net, refs, &v).unwrap()))
            });
        }
    }
    group.finish();
}

fn bench_loss_and_grad(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_grad");
    for batch in [32, 128] {
        let (net, xs) = setup(batch);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let teacher = rng::normal_vec(&mut rng::seeded(4), batch * net.output_dim());
        let targets = LossTargets::teacher(&teacher, net.output_dim());
        let kind = LossKind::KdCe { tau: 4.0 };
        for (name, pool) in pools() {
            group.bench_with_input(BenchmarkId::new(name, batch), &refs, |b, refs| {
                b.iter(|| pool.install(|| net.loss_and_grad(refs, &kind, &targets).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_batch_kernel, bench_kernel_vec_product, bench_loss_and_grad,
);
criterion_main!(benches);
