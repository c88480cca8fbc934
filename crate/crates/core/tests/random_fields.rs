use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use phonon_kinetics::lattice::ConditionStatus;
use phonon_kinetics::linalg::CMat;
use phonon_kinetics::random_fields::{Bump, StepProfile, ThermalGradient};
use phonon_kinetics::statistics::{axis_offsets, fourth_cumulant_test};
use phonon_kinetics::{
    validate_profile, CovarianceAccumulator, DispersionTable, ForceField, HomogeneousSampler,
    HomogeneousSpectrum, LatticeSpec, NoiseKind, SlowFamilyConfig, SlowFamilySampler,
};

const SEED: u64 = 0x5eed_0001;

fn massive(side: usize) -> (Arc<ForceField>, DispersionTable) {
    let lat = LatticeSpec::new(1, 1, side).unwrap();
    let f = ForceField::nearest_neighbor(lat, &[1.0], &[1.0]).unwrap();
    let t = DispersionTable::build(&f, None).unwrap();
    (Arc::new(f), t)
}

/// `1/ω²` for `ω² = 3 − 2 cos θ`.
fn inv_omega2(th: f64) -> f64 {
    1.0 / (3.0 - 2.0 * th.cos())
}

/// `(1/M) Σ_k g(θ_k) cos(θ_k z)` on a fine reference grid.
fn lattice_kernel(g: impl Fn(f64) -> f64, z: i64) -> f64 {
    let m = 4096;
    (0..m)
        .map(|k| {
            let th = 2.0 * PI * k as f64 / m as f64;
            g(th) * (th * z as f64).cos()
        })
        .sum::<f64>()
        / m as f64
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn periodogram_matches_the_target_density() {
    let side = 256;
    let (_, table) = massive(side);
    let spec = HomogeneousSpectrum::gibbs(&table, 1.0).unwrap();
    let sampler = HomogeneousSampler::new(&spec).unwrap();
    let samples = 2048;
    // direct DFT with e^{+iθx}, independent of the library's FFT plans
    let twiddle: Vec<Complex64> = (0..side * side)
        .map(|i| Complex64::from_polar(1.0, 2.0 * PI * ((i / side) * (i % side) % side) as f64 / side as f64))
        .collect();
    let mut power = vec![Vec::with_capacity(samples); side];
    for s in 0..samples {
        let y = sampler.sample_indexed(SEED, s as u64, NoiseKind::Gaussian);
        for (k, p) in power.iter_mut().enumerate() {
            let uk: Complex64 = (0..side).map(|x| twiddle[k * side + x] * y.u[x]).sum();
            p.push(uk.norm_sqr() / side as f64);
        }
    }
    let mut worst = 0.0f64;
    for (k, p) in power.iter().enumerate() {
        let (mean, se) = mean_and_se(p);
        let target = inv_omega2(2.0 * PI * k as f64 / side as f64);
        worst = worst.max((mean - target).abs() / se);
    }
    assert!(worst < 4.0, "max z {worst}");
}

#[test]
fn sampler_is_unbiased() {
    let (_, table) = massive(32);
    let spec = HomogeneousSpectrum::gibbs(&table, 1.0).unwrap();
    let sampler = HomogeneousSampler::new(&spec).unwrap();
    let draws: Vec<_> = (0..10_000).map(|i| sampler.sample_indexed(SEED, i, NoiseKind::Gaussian)).collect();
    for x in 0..32 {
        for comp in [0, 1] {
            let vals: Vec<f64> = draws.iter().map(|y| if comp == 0 { y.u[x] } else { y.v[x] }).collect();
            let (mean, se) = mean_and_se(&vals);
            assert!(mean.abs() < 4.0 * se, "site {x} block {comp}: {mean} ± {se}");
        }
    }
}

#[test]
fn zero_spectrum_and_determinism() {
    let lat = LatticeSpec::new(2, 2, 8).unwrap();
    let y = phonon_kinetics::sample_homogeneous(&HomogeneousSpectrum::zero(lat), 7).unwrap();
    assert!(y.u.iter().chain(&y.v).all(|v| *v == 0.0));

    let (_, table) = massive(64);
    let spec = HomogeneousSpectrum::gibbs(&table, 2.0).unwrap();
    let a = phonon_kinetics::sample_homogeneous(&spec, 99).unwrap();
    let b = phonon_kinetics::sample_homogeneous(&spec, 99).unwrap();
    let c = phonon_kinetics::sample_homogeneous(&spec, 100).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn uniform_noise_is_non_gaussian_with_the_same_covariance() {
    let side = 32;
    let (_, table) = massive(side);
    let spec = HomogeneousSpectrum::gibbs(&table, 1.0).unwrap();
    let sampler = HomogeneousSampler::new(&spec).unwrap();
    let draws: Vec<f64> = (0..100_000)
        .map(|i| sampler.sample_indexed(SEED, i, NoiseKind::Uniform).u[5])
        .collect();

    // u = h ∗ η with h(z) = (1/N) Σ_k ω_k^{-1} cos(θ_k z); a sum of independent uniforms
    // has fourth cumulant −1.2·Σh⁴ in units of the variance
    let h: Vec<f64> = (0..side as i64)
        .map(|z| {
            (0..side)
                .map(|k| {
                    let th = 2.0 * PI * k as f64 / side as f64;
                    inv_omega2(th).sqrt() * (th * z as f64).cos()
                })
                .sum::<f64>()
                / side as f64
        })
        .collect();
    let s2: f64 = h.iter().map(|x| x * x).sum();
    let s4: f64 = h.iter().map(|x| x.powi(4)).sum();
    let expected = -0.4 * s4 / (s2 * s2);

    let k = fourth_cumulant_test(&draws, 200, SEED).unwrap();
    assert!(k.z() > 5.0, "not detectably non-Gaussian: {k:?}");
    assert!((k.value - expected).abs() < 4.0 * k.stderr, "{} vs {expected} ± {}", k.value, k.stderr);

    let sq: Vec<f64> = draws.iter().map(|x| x * x).collect();
    let (var, se) = mean_and_se(&sq);
    let target = lattice_kernel(inv_omega2, 0);
    assert!((var - target).abs() < 4.0 * se, "{var} vs {target}");
}

#[test]
fn constant_profile_cubes_reproduce_the_kernel() {
    let side = 512;
    let (field, _) = massive(side);
    let temp = 1.5;
    let flat = ThermalGradient::new(field.clone(), temp, 0.0, Bump { center: vec![4.0], width: 1.0 }, Some(8.0)).unwrap();
    let block = 32;
    let cfg = SlowFamilyConfig::with_block_side(1.0 / 64.0, 0.8, NoiseKind::Gaussian, block).unwrap();
    let sampler = SlowFamilySampler::new(&flat, *field.lattice(), cfg).unwrap();
    // base 12 sites into each cube, so every offset up to 8 stays inside the cube
    let bases: Vec<usize> = (0..side / block).map(|c| c * block + 12).collect();
    let mut acc = CovarianceAccumulator::over_points(*field.lattice(), bases, axis_offsets(1, 8)).unwrap();
    for i in 0..2000 {
        acc.add(&sampler.sample_indexed(SEED, i));
    }
    let est = acc.finish().unwrap();
    let theory = |off: &[i64]| {
        let q00 = temp * lattice_kernel(inv_omega2, off[0]);
        let q11 = if off[0] == 0 { temp } else { 0.0 };
        CMat::from_row_slice(2, 2, &[q00.into(), 0.0.into(), 0.0.into(), q11.into()])
    };
    let z = est.max_z(theory);
    assert!(z < 4.0, "max z {z}");
}

#[test]
fn distinct_cubes_are_independent() {
    let side = 256;
    let (field, _) = massive(side);
    let flat = ThermalGradient::new(field.clone(), 1.0, 0.0, Bump { center: vec![2.0], width: 1.0 }, Some(4.0)).unwrap();
    let cfg = SlowFamilyConfig::with_block_side(1.0 / 64.0, 0.8, NoiseKind::Gaussian, 32).unwrap();
    let sampler = SlowFamilySampler::new(&flat, *field.lattice(), cfg).unwrap();
    let (mut across, mut within) = (Vec::new(), Vec::new());
    for i in 0..4000 {
        let y = sampler.sample_indexed(SEED, i);
        across.push(y.u[31] * y.u[32]);
        within.push(y.u[30] * y.u[31]);
    }
    let (m, se) = mean_and_se(&across);
    assert!(m.abs() < 4.0 * se, "cross-cube covariance {m} ± {se}");
    // the same lag inside a cube is clearly nonzero
    let (m, se) = mean_and_se(&within);
    assert!(m > 10.0 * se);
}

#[test]
fn step_profile_variances_on_each_side() {
    let side = 256;
    let (field, _) = massive(side);
    let (left, right) = (1.0, 3.0);
    let step = StepProfile::new(field.clone(), left, right, 2.0, Some(4.0)).unwrap();
    let cfg = SlowFamilyConfig::with_block_side(1.0 / 64.0, 0.8, NoiseKind::Gaussian, 8).unwrap();
    let sampler = SlowFamilySampler::new(&step, *field.lattice(), cfg).unwrap();
    let q0 = lattice_kernel(inv_omega2, 0);
    let mut cols: [Vec<f64>; 4] = Default::default();
    for i in 0..4000 {
        let y = sampler.sample_indexed(SEED, i);
        cols[0].push(y.u[60] * y.u[60]);
        cols[1].push(y.v[60] * y.v[60]);
        cols[2].push(y.u[190] * y.u[190]);
        cols[3].push(y.v[190] * y.v[190]);
    }
    let targets = [left * q0, left, right * q0, right];
    for (col, target) in cols.iter().zip(targets) {
        let (m, se) = mean_and_se(col);
        assert!((m - target).abs() < 4.0 * se, "{m} vs {target} ± {se}");
    }
}

#[test]
fn profile_validation_examples() {
    let (field, _) = massive(64);
    let rs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.5]).collect();

    let bump = ThermalGradient::new(field.clone(), 1.0, 0.3, Bump { center: vec![2.0], width: 0.5 }, None).unwrap();
    let rep = validate_profile(&bump, &rs, 64).unwrap();
    assert!(rep.all_pass(), "{rep:?}");
    assert!(rep.check("I1").unwrap().value > 1.0);
    assert!(rep.check("I4").unwrap().value > 0.0);

    let flat = ThermalGradient::new(field, 1.0, 0.0, Bump { center: vec![2.0], width: 0.5 }, None).unwrap();
    let rep = validate_profile(&flat, &rs, 64).unwrap();
    assert_eq!(rep.status("I4"), ConditionStatus::Pass);
    assert!(rep.check("I4").unwrap().value < 1e-12);
}

#[test]
fn block_side_follows_the_scale_rule() {
    for (eps, expect) in [(1.0 / 32.0, 16), (1.0 / 64.0, 32), (1.0 / 128.0, 64)] {
        let side = (64.0 / eps) as usize;
        let cfg = SlowFamilyConfig::new(eps, 0.8, NoiseKind::Gaussian, side).unwrap();
        assert_eq!(cfg.block_side, expect);
        assert_eq!(side % cfg.block_side, 0);
    }
    assert!(SlowFamilyConfig::new(1.5, 0.8, NoiseKind::Gaussian, 64).is_err());
    assert!(SlowFamilyConfig::new(0.1, 0.4, NoiseKind::Gaussian, 64).is_err());
}
