//! Data-parallel versus single-threaded collection and batch gradients.
//!
//! With default features the "parallel" cases use every available core;
//! `cargo bench --no-default-features` builds the sequential fallback, in
//! which both cases run in order.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tacservo::data::{collect, CollectionPlan};
use tacservo::par;
use tacservo::posenet::{Architecture, PoseNet};
use tacservo::{SensorSpec, Task};

fn thread_counts() -> Vec<(&'static str, usize)> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut v = vec![("sequential", 1)];
    if par::is_parallel() {
        v.push(("parallel", cores));
    }
    v
}

fn collection(c: &mut Criterion) {
    let spec = SensorSpec::tactip();
    let plan = CollectionPlan::defaults(Task::Edge).with_samples(64).with_seed(1);
    let mut g = c.benchmark_group("collect_64");
    g.sample_size(10);
    for (name, threads) in thread_counts() {
        g.bench_with_input(BenchmarkId::new(name, threads), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || collect(&plan, &spec).unwrap()))
        });
    }
    g.finish();
}

fn gradient(c: &mut Criterion) {
    let spec = SensorSpec::tactip();
    let ds = collect(&CollectionPlan::defaults(Task::Edge).with_samples(32).with_seed(2), &spec).unwrap();
    let model = PoseNet::<f32>::new(
        Architecture::standard(spec.image_height, spec.image_width),
        &ds.plan.label_ranges(),
        3,
    )
    .unwrap();
    let labels: Vec<[f64; 2]> = ds.samples.iter().map(|s| s.label.as_array()).collect();
    let batch: Vec<(_, &[f64])> = ds.samples.iter().zip(&labels).map(|(s, l)| (&s.image, &l[..])).collect();
    let mut g = c.benchmark_group("gradient_batch_32");
    g.sample_size(10);
    for (name, threads) in thread_counts() {
        g.bench_with_input(BenchmarkId::new(name, threads), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || model.loss_and_gradient(&batch).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, collection, gradient);
criterion_main!(benches);
