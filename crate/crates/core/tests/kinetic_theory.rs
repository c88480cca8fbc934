use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use phonon_kinetics::kinetic::{limit_of_field, project_profile, projected_wigner, CROSS_CHECK_TOL};
use phonon_kinetics::linalg::{frobenius, identity, min_eigenvalue, CMat, MatField};
use phonon_kinetics::random_fields::{Bump, StepProfile, ThermalGradient, WavePacket};
use phonon_kinetics::{
    limit_covariance, local_covariance, project_wigner, stationarity_check, transport_evolve,
    transport_pde_oracle, DispersionTable, ForceField, HomogeneousSpectrum, LatticeSpec, RGrid,
    SlowProfile,
};
use proptest::prelude::*;

fn massive(side: usize) -> (Arc<ForceField>, DispersionTable) {
    let lat = LatticeSpec::new(1, 1, side).unwrap();
    let f = ForceField::nearest_neighbor(lat, &[1.0], &[1.0]).unwrap();
    let t = DispersionTable::build(&f, None).unwrap();
    (Arc::new(f), t)
}

fn coupled(side: usize) -> (Arc<ForceField>, DispersionTable) {
    let lat = LatticeSpec::new(1, 2, side).unwrap();
    let a = DMatrix::from_row_slice(2, 2, &[-0.5, -0.15, -0.05, -0.6]);
    let v0 = DMatrix::from_row_slice(2, 2, &[2.4, 0.3, 0.3, 2.9]);
    let f = ForceField::new(lat, vec![(vec![0], v0), (vec![1], a.clone()), (vec![-1], a.transpose())]).unwrap();
    let t = DispersionTable::build(&f, None).unwrap();
    (Arc::new(f), t)
}

/// `q̂(θ) = A(θ)A(θ)*` with `A(θ) = a₀ + a₁e^{iθ}` real: PSD and `q̂(−θ) = conj q̂(θ)`.
fn generic_density(table: &DispersionTable, coeffs: &[f64]) -> HomogeneousSpectrum {
    let m = 2 * table.components();
    let a0 = DMatrix::from_iterator(m, m, coeffs[..m * m].iter().copied()).map(|x| Complex64::new(x, 0.0));
    let a1 = DMatrix::from_iterator(m, m, coeffs[m * m..2 * m * m].iter().copied()).map(|x| Complex64::new(x, 0.0));
    HomogeneousSpectrum::from_fn(*table.lattice(), |k| {
        let th = table.lattice().theta(k)[0];
        let a = &a0 + &a1 * Complex64::from_polar(1.0, th);
        &a * a.adjoint()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn limit_is_a_psd_stationary_fixed_point(coeffs in prop::collection::vec(-1.0f64..1.0, 32)) {
        let (_, t) = coupled(32);
        let q0 = generic_density(&t, &coeffs);
        let lim = limit_covariance(&q0, &t).unwrap();
        let twice = limit_of_field(&t, &lim.data).unwrap();
        for k in 0..t.points() {
            let m = lim.matrix(k);
            let scale = frobenius(&m).max(1.0);
            prop_assert!(frobenius(&(&twice.matrix(k) - &m)) < 1e-10 * scale);
            prop_assert!(frobenius(&(&m - m.adjoint())) < 1e-10 * scale);
            prop_assert!(min_eigenvalue(&m) > -1e-10 * scale);
        }
        for time in [1.0, 7.3, 50.0] {
            prop_assert!(stationarity_check(&lim.data, &t, time) < 1e-8);
        }
        prop_assert!(stationarity_check(&q0.data().clone(), &t, 0.0) < 1e-12);
    }

    #[test]
    fn scalar_limit_matches_hand_evaluation(g in prop::collection::vec(0.1f64..2.0, 17)) {
        // even g on a 32-point grid, displacement-only input
        let (_, t) = massive(32);
        let gk = |k: usize| g[if k <= 16 { k } else { 32 - k }];
        let q0 = HomogeneousSpectrum::from_fn(*t.lattice(), |k| {
            CMat::from_row_slice(2, 2, &[gk(k).into(), 0.0.into(), 0.0.into(), 0.0.into()])
        })
        .unwrap();
        let lim = limit_covariance(&q0, &t).unwrap();
        for k in 0..32 {
            let th = 2.0 * PI * k as f64 / 32.0;
            let w2 = 3.0 - 2.0 * th.cos();
            let m = lim.matrix(k);
            prop_assert!((m[(0, 0)] - gk(k) / 2.0).norm() < 1e-12);
            prop_assert!((m[(1, 1)] - w2 * gk(k) / 2.0).norm() < 1e-12);
            prop_assert!(m[(0, 1)].norm() < 1e-12 && m[(1, 0)].norm() < 1e-12);
        }
    }
}

#[test]
fn generic_input_is_not_stationary() {
    let (_, t) = coupled(32);
    let coeffs: Vec<f64> = (0..32).map(|i| ((i * 37 % 17) as f64 / 17.0) - 0.5).collect();
    let q0 = generic_density(&t, &coeffs);
    assert!(stationarity_check(&q0.data().clone(), &t, 7.3) > 1e-2);
    let zero = limit_covariance(&HomogeneousSpectrum::zero(*t.lattice()), &t).unwrap();
    assert!((0..t.points()).all(|k| frobenius(&zero.matrix(k)) == 0.0));
}

#[test]
fn projection_on_two_bands() {
    let (_, t) = coupled(32);
    let rg = RGrid::new(1, 8, 4.0).unwrap();
    let id = project_wigner(|_, _| identity(2), &t, rg).unwrap();
    let w0 = CMat::from_row_slice(2, 2, &[
        Complex64::new(1.0, 0.0),
        Complex64::new(0.3, -0.7),
        Complex64::new(0.3, 0.7),
        Complex64::new(2.0, 0.0),
    ]);
    let general = project_wigner(|_, _| w0.clone(), &t, rg).unwrap();
    assert!(general.band_diagonal_error(&t) < 1e-12);
    for k in 0..t.points() {
        assert_eq!(t.band_count(k), 2);
        for j in 0..rg.points() {
            assert!(frobenius(&(id.wigner(k, j) - identity(2))) < 1e-12);
            let w = general.wigner(k, j);
            let cross = t.projector(k, 0) * &w * t.projector(k, 1);
            assert!(frobenius(&cross) < 1e-12);
        }
    }
}

/// Periodic Gaussian bump on a box of side `length`.
fn bump(r: f64, centre: f64, width: f64, length: f64) -> f64 {
    let mut d = r - centre;
    d -= length * (d / length).round();
    (-d * d / (2.0 * width * width)).exp()
}

#[test]
fn transport_composition_stays_within_interpolation_error() {
    let (_, t) = massive(32);
    let length = 16.0;
    let rg = RGrid::new(1, 128, length).unwrap();
    let initial = |shift: f64| {
        let t = &t;
        project_wigner(
            move |r, k| identity(1) * Complex64::new(bump(r[0] - shift * t.velocity(k, 0)[0], 8.0, 1.2, length), 0.0),
            t,
            rg,
        )
        .unwrap()
    };
    let s = initial(0.0);
    let (t1, t2) = (1.37, 2.91);
    let error = |tau: f64| transport_evolve(&s, tau).l1_distance(&initial(tau)).unwrap();
    let bound = error(t1).max(error(t2)).max(error(t1 + t2));
    let composed = transport_evolve(&transport_evolve(&s, t1), t2);
    let direct = transport_evolve(&s, t1 + t2);
    let gap = composed.l1_distance(&direct).unwrap();
    assert!(gap < 2.0 * bound, "gap {gap:e}, single-step bound {bound:e}");
    assert!((composed.total_trace() - s.total_trace()).abs() < 1e-8 * s.total_trace());
}

#[test]
fn upwind_oracle_converges_at_first_order() {
    let (f, t) = massive(32);
    let packet = WavePacket::new(f, 0.0, 1.0, Bump { center: vec![32.0], width: 4.0 }, vec![PI / 2.0], 4.0, Some(64.0)).unwrap();
    let tau = 16.0;
    let errs: Vec<f64> = [64, 128, 256]
        .iter()
        .map(|&cells| {
            let s = project_profile(&packet, &t, RGrid::new(1, cells, 64.0).unwrap()).unwrap();
            let exact = transport_evolve(&s, tau);
            let pde = transport_pde_oracle(&s, tau, 0.5).unwrap();
            assert!((pde.total_trace() - s.total_trace()).abs() < 1e-8 * s.total_trace());
            pde.l1_distance(&exact).unwrap()
        })
        .collect();
    for w in errs.windows(2) {
        let ratio = w[1] / w[0];
        assert!((0.4..=0.6).contains(&ratio), "ratio {ratio} from {errs:?}");
    }
}

fn stock_profiles(f: &Arc<ForceField>) -> Vec<Box<dyn SlowProfile>> {
    vec![
        Box::new(ThermalGradient::new(f.clone(), 1.0, 0.5, Bump { center: vec![4.0], width: 1.5 }, Some(8.0)).unwrap()),
        Box::new(StepProfile::new(f.clone(), 1.0, 2.5, 4.0, Some(8.0)).unwrap()),
        Box::new(WavePacket::new(f.clone(), 0.1, 1.0, Bump { center: vec![4.0], width: 1.0 }, vec![1.2], 4.0, Some(8.0)).unwrap()),
    ]
}

#[test]
fn local_covariance_constructions_agree_for_stock_profiles() {
    for (f, t) in [massive(64), coupled(32)] {
        for p in stock_profiles(&f) {
            for tau in [0.0, 0.6, 2.3] {
                for r in [1.1, 3.9, 6.5] {
                    let q = local_covariance(p.as_ref(), &t, tau, &[r]).unwrap();
                    assert!(q.cross_check < CROSS_CHECK_TOL, "{} tau={tau} r={r}: {:e}", p.name(), q.cross_check);
                    assert!(q.equipartition_defect(&t) < 1e-8);
                    assert!(q.antisymmetry_defect() < 1e-8);
                    for k in 0..t.points() {
                        let m = q.matrix(k);
                        assert!(min_eigenvalue(&m) >= -1e-8 * frobenius(&m).max(1.0), "{} not PSD at k={k}", p.name());
                    }
                }
            }
        }
    }
}

#[test]
fn projected_wigner_of_a_thermal_profile() {
    // W^p(τ; r, θ) = T(r − τω'(θ))/ω(θ) for the scalar model
    let (f, t) = massive(64);
    let p = ThermalGradient::new(f, 1.0, 0.5, Bump { center: vec![4.0], width: 1.5 }, Some(8.0)).unwrap();
    let (tau, r) = (1.7, 3.0);
    let wp: MatField = projected_wigner(&p, &t, tau, &[r]);
    for k in 0..t.points() {
        let v = t.velocity(k, 0)[0];
        let expect = p.temperature(&[r - tau * v]) / t.freq(k, 0);
        assert!((wp.get(k)[(0, 0)] - expect).norm() < 1e-12);
    }
}
