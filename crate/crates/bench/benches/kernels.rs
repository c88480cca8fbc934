use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use phonon_kinetics::{evolve, HomogeneousSampler, HomogeneousSpectrum, NoiseKind, PropagatorTable};
use phonon_kinetics_bench::{massive, table};

fn dispersion(c: &mut Criterion) {
    let mut g = c.benchmark_group("dispersion_table");
    for (dim, side) in [(1, 4096), (2, 128)] {
        let field = massive(dim, side);
        g.bench_with_input(BenchmarkId::new(format!("d{dim}"), side), &field, |b, f| b.iter(|| table(f)));
    }
    g.finish();
}

fn evolution(c: &mut Criterion) {
    let mut g = c.benchmark_group("evolve");
    for (dim, side) in [(1, 4096), (2, 256)] {
        let field = massive(dim, side);
        let t = table(&field);
        let prop = PropagatorTable::build(&t, 200.0).unwrap();
        let spec = HomogeneousSpectrum::gibbs(&t, 1.0).unwrap();
        let y = HomogeneousSampler::new(&spec).unwrap().sample_indexed(1, 0, NoiseKind::Gaussian);
        g.bench_with_input(BenchmarkId::new(format!("d{dim}"), side), &y, |b, y| b.iter(|| evolve(y, &prop).unwrap()));
    }
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let mut g = c.benchmark_group("homogeneous_sample");
    for noise in [NoiseKind::Gaussian, NoiseKind::Uniform] {
        let t = table(&massive(1, 4096));
        let sampler = HomogeneousSampler::new(&HomogeneousSpectrum::gibbs(&t, 1.0).unwrap()).unwrap();
        let mut i = 0u64;
        g.bench_function(format!("{noise:?}"), |b| {
            b.iter(|| {
                i += 1;
                sampler.sample_indexed(7, i, noise)
            })
        });
    }
    g.finish();
}

criterion_group!(benches, dispersion, evolution, sampling);
criterion_main!(benches);
