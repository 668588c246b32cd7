use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msdmf_core::estep::compute_moments;
use msdmf_core::init::{build_init, InitConfig};
use msdmf_core::{filter_pass, fit, simulate, smooth_pass, spectral_radius_switching, FitConfig, SimConfig};

fn filtering(c: &mut Criterion) {
    let mut group = c.benchmark_group("e_step");
    for n in [100, 200, 500] {
        let sim = simulate(&SimConfig::reference(n, 1)).unwrap();
        group.bench_with_input(BenchmarkId::new("filter", n), &sim, |b, sim| {
            b.iter(|| filter_pass(black_box(&sim.truth), black_box(&sim.series)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("filter_smooth_moments", n), &sim, |b, sim| {
            b.iter(|| {
                let filt = filter_pass(&sim.truth, &sim.series).unwrap();
                let smooth = smooth_pass(&sim.truth, &filt).unwrap();
                compute_moments(&sim.truth, &filt, &smooth).unwrap()
            })
        });
    }
    group.finish();
}

fn estimation(c: &mut Criterion) {
    let sim = simulate(&SimConfig::reference(200, 2)).unwrap();
    let mut group = c.benchmark_group("estimation");
    group.sample_size(10);
    group.bench_function("init_n200", |b| b.iter(|| build_init(&sim.series, sim.truth.dims, &InitConfig::default()).unwrap()));
    group.bench_function("fit_n200", |b| b.iter(|| fit(&sim.series, sim.truth.dims, &FitConfig::default()).unwrap()));
    group.finish();
}

fn stationarity(c: &mut Criterion) {
    let truth = simulate(&SimConfig::reference(10, 3)).unwrap().truth;
    c.bench_function("spectral_radius_reference", |b| b.iter(|| spectral_radius_switching(black_box(&truth)).unwrap()));
}

criterion_group!(benches, filtering, estimation, stationarity);
criterion_main!(benches);
