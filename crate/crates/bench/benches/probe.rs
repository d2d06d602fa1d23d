use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use subspace_probe::probe::{self, SweepConfig};
use subspace_probe::synth::{self, SynthSpec};
use subspace_probe::{fit_pls, partial_spearman, spearman, LayerSource};

fn correlation(c: &mut Criterion) {
    let mut group = c.benchmark_group("spearman");
    for n in [1_000usize, 10_000] {
        let out = synth::generate(&SynthSpec::pair(n, 4, 45.0, 0.5, 1.0, 1)).unwrap();
        let a = out.latents.column(0).to_vec();
        let b = out.latents.column(1).to_vec();
        let z: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        group.bench_with_input(BenchmarkId::new("plain", n), &n, |bench, _| {
            bench.iter(|| spearman(black_box(&a), black_box(&b)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("partial", n), &n, |bench, _| {
            bench.iter(|| partial_spearman(black_box(&a), black_box(&b), black_box(&z)).unwrap())
        });
    }
    group.finish();
}

fn pls(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_pls");
    group.sample_size(20);
    let out = synth::generate(&SynthSpec::pair(2_000, 256, 45.0, 0.0, 1.0, 2)).unwrap();
    let x = out.layers.layer(0).unwrap();
    let y = out.latents.column(0);
    for rank in [1usize, 8, 32] {
        group.bench_with_input(BenchmarkId::from_parameter(rank), &rank, |bench, &k| {
            bench.iter(|| fit_pls(black_box(x.view()), black_box(y), k).unwrap())
        });
    }
    group.finish();
}

fn grid(c: &mut Criterion) {
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    let mut spec = SynthSpec::pair(1_000, 128, 45.0, 0.0, 1.0, 3);
    spec.layer_profile = SynthSpec::ramp_profile(8, 4);
    let out = synth::generate(&spec).unwrap();
    let rows: Vec<usize> = (0..spec.n).collect();
    let y = out.latents.column(0).to_vec();
    let cfg = SweepConfig { ranks: vec![1, 2, 4, 8, 16], ..SweepConfig::default() };
    group.bench_function("8_layers_5_ranks", |bench| {
        bench.iter(|| probe::sweep(&out.layers, &rows, &y, "s", &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, correlation, pls, grid);
criterion_main!(benches);
