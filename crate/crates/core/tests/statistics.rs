use std::f64::consts::PI;

use num_complex::Complex64;
use phonon_kinetics::linalg::CMat;
use phonon_kinetics::mc::sample_rng;
use phonon_kinetics::statistics::{
    aa_covariance, all_sites, axis_offsets, characteristic_functional, estimate_covariance,
    uniform_bound_check, wigner_estimate, Taper,
};
use phonon_kinetics::{
    diff_tables, evolve, AFieldMap, DispersionTable, EstimateTable, ForceField, HomogeneousSampler,
    HomogeneousSpectrum, LatticeSpec, NoiseKind, PhaseField, Probe, PropagatorTable, WignerWindow,
};
use rand_distr::{Distribution, StandardNormal};

const SEED: u64 = 0x57a7_0002;

fn massive(side: usize) -> DispersionTable {
    let lat = LatticeSpec::new(1, 1, side).unwrap();
    DispersionTable::build(&ForceField::nearest_neighbor(lat, &[1.0], &[1.0]).unwrap(), None).unwrap()
}

fn omega(th: f64) -> f64 {
    (3.0 - 2.0 * th.cos()).sqrt()
}

fn gibbs_draws(table: &DispersionTable, temp: f64, count: usize) -> Vec<PhaseField> {
    let spec = HomogeneousSpectrum::gibbs(table, temp).unwrap();
    let sampler = HomogeneousSampler::new(&spec).unwrap();
    (0..count as u64).map(|i| sampler.sample_indexed(SEED, i, NoiseKind::Gaussian)).collect()
}

/// Position-space Gibbs correlation from the closed-form dispersion on a fine grid.
fn gibbs_correlation(temp: f64, off: &[i64]) -> CMat {
    let m = 4096;
    let q00 = (0..m)
        .map(|k| {
            let th = 2.0 * PI * k as f64 / m as f64;
            (th * off[0] as f64).cos() / omega(th).powi(2)
        })
        .sum::<f64>()
        * temp
        / m as f64;
    let q11 = if off[0] == 0 { temp } else { 0.0 };
    CMat::from_row_slice(2, 2, &[q00.into(), 0.0.into(), 0.0.into(), q11.into()])
}

#[test]
fn standard_errors_shrink_like_inverse_root_count() {
    let table = massive(64);
    let draws = gibbs_draws(&table, 1.0, 4000);
    let small = estimate_covariance(&draws[..1000], 10, axis_offsets(1, 3)).unwrap();
    let large = estimate_covariance(&draws[..2000], 10, axis_offsets(1, 3)).unwrap();
    for o in 0..small.offsets.len() {
        for (r, c) in [(0, 0), (1, 1), (0, 1)] {
            let ratio = large.stderr(o, r, c) / small.stderr(o, r, c);
            assert!((0.6..=0.85).contains(&ratio), "offset {o} ({r},{c}): ratio {ratio}");
        }
    }
}

#[test]
fn covariance_matches_gibbs_and_is_translation_invariant() {
    let table = massive(128);
    let draws = gibbs_draws(&table, 2.0, 4000);
    let a = estimate_covariance(&draws, 17, axis_offsets(1, 6)).unwrap();
    let b = estimate_covariance(&draws, 90, axis_offsets(1, 6)).unwrap();
    assert!(a.max_z(|o| gibbs_correlation(2.0, o)) < 4.0);
    for o in 0..a.offsets.len() {
        for r in 0..2 {
            for c in 0..2 {
                let d = (a.mean[o][(r, c)] - b.mean[o][(r, c)]).norm();
                let se = a.stderr(o, r, c).hypot(b.stderr(o, r, c));
                assert!(d < 4.0 * se.max(1e-15), "offset {o} ({r},{c})");
            }
        }
    }
}

#[test]
fn a_field_parseval_and_inversion() {
    let side = 64;
    let table = massive(side);
    let map = AFieldMap::new(&table, false).unwrap();
    let y = &gibbs_draws(&table, 1.0, 1)[0];
    let a = map.apply(y).unwrap();
    let lhs: f64 = a.iter().map(|z| z.norm_sqr()).sum();

    // Σ|a|² = (1/2N) Σ_k (ω|û|² + |v̂|²/ω), by a direct DFT
    let rhs: f64 = (0..side)
        .map(|k| {
            let th = 2.0 * PI * k as f64 / side as f64;
            let (mut uk, mut vk) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
            for x in 0..side {
                let e = Complex64::from_polar(1.0, th * x as f64);
                uk += e * y.u[x];
                vk += e * y.v[x];
            }
            omega(th) * uk.norm_sqr() + vk.norm_sqr() / omega(th)
        })
        .sum::<f64>()
        / (2.0 * side as f64);
    assert!((lhs - rhs).abs() < 1e-9 * rhs, "{lhs} vs {rhs}");

    let back = map.invert(&a);
    let err = back.u.iter().zip(&y.u).chain(back.v.iter().zip(&y.v)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "{err:e}");
}

#[test]
fn a_field_of_a_single_mode() {
    // û concentrated at θ = π where ω = √5 for m = 1
    let side = 16;
    let table = massive(side);
    let map = AFieldMap::new(&table, false).unwrap();
    let u: Vec<f64> = (0..side).map(|x| if x % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let v: Vec<f64> = u.iter().map(|x| 0.5 * x).collect();
    let y = PhaseField::new(*table.lattice(), u.clone(), v).unwrap();
    let a = map.apply(&y).unwrap();
    let w = 5f64.sqrt();
    for x in 0..side {
        let expect = Complex64::new(w.sqrt() * u[x], 0.5 * u[x] / w.sqrt()) / 2f64.sqrt();
        assert!((a[x] - expect).norm() < 1e-12);
    }
}

#[test]
fn gibbs_wigner_is_t_over_omega_at_any_r() {
    let side = 256;
    let table = massive(side);
    let temp = 1.3;
    let draws = gibbs_draws(&table, temp, 800);
    let eps = 1.0 / 64.0;
    let window = |r: f64| WignerWindow {
        tau: 0.0,
        epsilon: eps,
        r: vec![r],
        ymax: 40,
        taper: Taper::Boxcar,
    };
    let w1 = wigner_estimate(&draws, &table, window(1.0)).unwrap();
    let w2 = wigner_estimate(&draws, &table, window(2.7)).unwrap();
    for k in 0..side {
        let th = 2.0 * PI * k as f64 / side as f64;
        let target = temp / omega(th);
        let m1 = w1.mean.get(k)[(0, 0)];
        assert!((m1.re - target).abs() < 4.0 * w1.stderr(k, 0, 0), "k={k}: {m1} vs {target}");
        // Hermitian (real in the scalar case) within 3σ
        assert!(m1.im.abs() < 3.0 * w1.stderr(k, 0, 0).max(1e-12) || m1.im.abs() < 1e-12, "k={k}");
        let m2 = w2.mean.get(k)[(0, 0)];
        let se = w1.stderr(k, 0, 0).hypot(w2.stderr(k, 0, 0));
        assert!((m1 - m2).norm() < 4.0 * se, "r dependence at k={k}");
    }
}

#[test]
fn aa_moment_vanishes_for_gibbs_input() {
    let table = massive(128);
    let draws = gibbs_draws(&table, 1.0, 2000);
    let est = aa_covariance(&draws, &table, vec![0, 40, 77], axis_offsets(1, 4)).unwrap();
    let z = est.max_z(|_| CMat::zeros(1, 1));
    assert!(z < 4.0, "max z {z}");
}

#[test]
fn characteristic_functional_of_stationary_gibbs_input() {
    let table = massive(128);
    let lat = *table.lattice();
    let draws = gibbs_draws(&table, 1.0, 6000);
    let probe = Probe {
        terms: vec![(10, 0, 0, 0.6), (11, 0, 0, -0.3), (10, 1, 0, 0.4), (13, 1, 0, 0.2)],
    };
    let q = probe.quadratic_form(&lat, |o| gibbs_correlation(1.0, o));
    let prop = PropagatorTable::build(&table, 50.0).unwrap();
    for t in [0.0, 50.0] {
        let values: Vec<f64> = draws
            .iter()
            .map(|y| {
                if t == 0.0 {
                    probe.evaluate(y)
                } else {
                    probe.evaluate(&evolve(y, &prop).unwrap())
                }
            })
            .collect();
        let res = characteristic_functional(&values, q).unwrap();
        assert!(res.z() < 4.0, "t={t}: {res:?}");
    }
    let zero = Probe { terms: vec![] };
    let res = characteristic_functional(&vec![zero.evaluate(&draws[0]); 10], 0.0).unwrap();
    assert_eq!(res.difference, 0.0);
}

#[test]
fn uniform_bound_is_flat_for_stationary_input() {
    let table = massive(128);
    let draws = gibbs_draws(&table, 1.0, 1000);
    let mut ests = Vec::new();
    for t in [0.0, 20.0, 60.0, 150.0] {
        let prop = PropagatorTable::build(&table, t).unwrap();
        let evolved: Vec<PhaseField> = draws.iter().map(|y| evolve(y, &prop).unwrap()).collect();
        ests.push((t, estimate_covariance(&evolved, 5, axis_offsets(1, 4)).unwrap()));
    }
    let rows: Vec<(f64, f64, &_)> = ests.iter().map(|(t, e)| (1.0 / 64.0, *t, e)).collect();
    let rep = uniform_bound_check(&rows).unwrap();
    assert!(rep.no_growth, "{rep:?}");

    let lat = *table.lattice();
    let zeros = vec![PhaseField::zeros(lat); 4];
    let e = estimate_covariance(&zeros, 0, axis_offsets(1, 2)).unwrap();
    let rep = uniform_bound_check(&[(0.1, 1.0, &e), (0.1, 2.0, &e)]).unwrap();
    assert_eq!(rep.max_norm, 0.0);
}

#[test]
fn translation_averaged_estimator_uses_every_site() {
    let table = massive(32);
    let draws = gibbs_draws(&table, 1.0, 500);
    let mut acc = phonon_kinetics::CovarianceAccumulator::over_points(*table.lattice(), all_sites(table.lattice()), axis_offsets(1, 2)).unwrap();
    for y in &draws {
        acc.add(y);
    }
    let est = acc.finish().unwrap();
    assert_eq!(est.base_points, 32);
    assert!(est.max_z(|o| gibbs_correlation(1.0, o)) < 4.0);
}

#[test]
fn diff_passes_gaussian_noise_around_theory() {
    let mut rng = sample_rng(SEED, 0);
    // the rule compares the exceedance fraction with twice the tail rate, so it needs
    // enough entries for the expected count (here ~13) to be a rate rather than 0 or 1
    let (mut emp, mut th) = (EstimateTable::default(), EstimateTable::default());
    for i in 0..200_000 {
        let truth = Complex64::new((i as f64 * 0.37).sin(), 0.0);
        let noise: f64 = StandardNormal.sample(&mut rng);
        th.push(i, "00", 0, 0, truth, 0.0);
        emp.push(i, "00", 0, 0, truth + noise * 0.01, 0.01);
    }
    let rep = diff_tables(&emp, &th, 4.0).unwrap();
    assert!(rep.pass, "{rep:?}");

    let same = diff_tables(&th, &th, 4.0).unwrap();
    assert!(same.pass && same.max_z == 0.0);
}
