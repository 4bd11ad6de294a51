use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use margin_forge::shrinkage::{generate, gradient, SyntheticConfig};
use margin_forge::{aggregate_dataset, MarginVector, ProjectionSpec, DEFAULT_EPS};

fn margin_vectors(n: usize) -> Vec<MarginVector> {
    (0..n)
        .map(|i| {
            let x = i as f64;
            MarginVector::new(
                format!("r{i}"),
                vec![
                    ("ex".into(), (x * 0.37).sin() * 4.0),
                    ("im".into(), (x * 0.11).cos() * 3.0),
                    ("ifd".into(), (x * 0.05).sin() * 0.2),
                ],
            )
            .unwrap()
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let batch = generate(&SyntheticConfig::new(vec![2.0, 1.0], 2.0, 200_000, 1)).unwrap();
    let omega = [1.5, 0.5];
    let mvs = margin_vectors(100_000);
    let specs: BTreeMap<String, ProjectionSpec> = [("ex", 4.0), ("im", 3.0), ("ifd", 0.2)]
        .into_iter()
        .map(|(s, u)| (s.to_string(), ProjectionSpec::new(s, -2.0, u).unwrap()))
        .collect();

    let mut group = c.benchmark_group("logistic_gradient_200k");
    group.sample_size(20);
    group.bench_function("rayon", |b| {
        b.iter(|| gradient(black_box(&batch), &omega, 1e-6))
    });
    group.bench_function("one_thread", |b| {
        b.iter(|| serial.install(|| gradient(black_box(&batch), &omega, 1e-6)))
    });
    group.finish();

    let mut group = c.benchmark_group("aggregate_100k");
    group.sample_size(20);
    group.bench_function("rayon", |b| {
        b.iter(|| aggregate_dataset(black_box(&mvs), &specs, DEFAULT_EPS).unwrap())
    });
    group.bench_function("one_thread", |b| {
        b.iter(|| {
            serial.install(|| aggregate_dataset(black_box(&mvs), &specs, DEFAULT_EPS).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
