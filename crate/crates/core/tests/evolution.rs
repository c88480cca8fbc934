use nalgebra::DMatrix;
use phonon_kinetics::evolution::{partition_weights, GreenPart};
use phonon_kinetics::lattice::CriticalSet;
use phonon_kinetics::linalg::{frobenius, identity};
use phonon_kinetics::{
    decay_diagnostic, energy, evolve, ConditionTolerances, DispersionTable, ForceField,
    GreenFunction, LatticeSpec, PhaseField, PropagatorTable,
};
use proptest::prelude::*;

fn nn(dim: usize, side: usize, gammas: &[f64], masses: &[f64]) -> ForceField {
    let lat = LatticeSpec::new(dim, gammas.len(), side).unwrap();
    ForceField::nearest_neighbor(lat, gammas, masses).unwrap()
}

fn coupled(side: usize) -> ForceField {
    let lat = LatticeSpec::new(1, 2, side).unwrap();
    let a = DMatrix::from_row_slice(2, 2, &[-0.5, -0.15, -0.05, -0.6]);
    let v0 = DMatrix::from_row_slice(2, 2, &[2.4, 0.3, 0.3, 2.9]);
    ForceField::new(lat, vec![(vec![0], v0), (vec![1], a.clone()), (vec![-1], a.transpose())]).unwrap()
}

fn run(table: &DispersionTable, y: &PhaseField, t: f64) -> PhaseField {
    evolve(y, &PropagatorTable::build(table, t).unwrap()).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn field_strategy(len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-1.0f64..1.0, len),
        prop::collection::vec(-1.0f64..1.0, len),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn energy_is_conserved((u, v) in field_strategy(2 * 64), t in prop::sample::select(vec![1.0, 10.0, 100.0, 1000.0])) {
        let f = coupled(64);
        let table = DispersionTable::build(&f, None).unwrap();
        let y = PhaseField::new(*f.lattice(), u, v).unwrap();
        let h0 = energy(&y, &f).unwrap();
        let h1 = energy(&run(&table, &y, t), &f).unwrap();
        prop_assert!(((h1 - h0) / h0).abs() < 1e-9, "relative drift {:e}", (h1 - h0) / h0);
    }

    #[test]
    fn energy_is_conserved_in_two_dimensions((u, v) in field_strategy(16 * 16), t in 0.5f64..1000.0) {
        let f = nn(2, 16, &[1.3], &[0.0]);
        let table = DispersionTable::build(&f, None).unwrap();
        let y = PhaseField::new(*f.lattice(), u, v).unwrap();
        let h0 = energy(&y, &f).unwrap();
        let h1 = energy(&run(&table, &y, t), &f).unwrap();
        prop_assert!(((h1 - h0) / h0).abs() < 1e-9);
    }

    #[test]
    fn evolution_is_reversible((u, v) in field_strategy(2 * 64), t in 0.1f64..1000.0) {
        let f = coupled(64);
        let table = DispersionTable::build(&f, None).unwrap();
        let y = PhaseField::new(*f.lattice(), u, v).unwrap();
        let back = run(&table, &run(&table, &y, t), -t);
        prop_assert!(max_diff(&back.u, &y.u) < 1e-9 && max_diff(&back.v, &y.v) < 1e-9);
    }
}

#[test]
fn propagator_group_law_and_determinant() {
    for f in [coupled(64), nn(2, 16, &[1.0], &[0.0])] {
        let table = DispersionTable::build(&f, None).unwrap();
        let n = f.lattice().components;
        for (t, s) in [(0.7, 2.3), (13.1, -4.2), (250.0, 749.5)] {
            let gt = PropagatorTable::build(&table, t).unwrap();
            let gs = PropagatorTable::build(&table, s).unwrap();
            let gts = PropagatorTable::build(&table, t + s).unwrap();
            for k in 0..table.points() {
                let prod = gt.matrix(k) * gs.matrix(k);
                let scale = frobenius(&gts.matrix(k)).max(1.0);
                assert!(frobenius(&(prod - gts.matrix(k))) / scale < 1e-9, "group law at k={k}, t={t}, s={s}");
                let det = gt.matrix(k).determinant();
                assert!((det.re - 1.0).abs() < 1e-8 && det.im.abs() < 1e-8, "det {det} at k={k}");
            }
        }
        let g0 = PropagatorTable::build(&table, 0.0).unwrap();
        for k in 0..table.points() {
            assert!(frobenius(&(g0.matrix(k) - identity(2 * n))) < 1e-12);
        }
    }
}

#[test]
fn normal_modes_on_a_sixteen_point_lattice() {
    // m = 0 so the θ = 0 mode also exercises the sinc limit
    let side = 16;
    let f = nn(1, side, &[1.0], &[0.0]);
    let table = DispersionTable::build(&f, None).unwrap();
    let lat = *f.lattice();
    let t = 3.7;
    for k in 0..side {
        let th = 2.0 * std::f64::consts::PI * k as f64 / side as f64;
        let w = 2.0 * (th / 2.0).sin().abs();
        let cosx: Vec<f64> = (0..side).map(|x| (th * x as f64).cos()).collect();
        let sinc = if w == 0.0 { t } else { (w * t).sin() / w };

        let y = PhaseField::new(lat, cosx.clone(), vec![0.0; side]).unwrap();
        let out = run(&table, &y, t);
        let u: Vec<f64> = cosx.iter().map(|c| (w * t).cos() * c).collect();
        let v: Vec<f64> = cosx.iter().map(|c| -w * (w * t).sin() * c).collect();
        assert!(max_diff(&out.u, &u) < 1e-9 && max_diff(&out.v, &v) < 1e-9, "displacement mode {k}");

        let y = PhaseField::new(lat, vec![0.0; side], cosx.clone()).unwrap();
        let out = run(&table, &y, t);
        let u: Vec<f64> = cosx.iter().map(|c| sinc * c).collect();
        let v: Vec<f64> = cosx.iter().map(|c| (w * t).cos() * c).collect();
        assert!(max_diff(&out.u, &u) < 1e-9 && max_diff(&out.v, &v) < 1e-9, "velocity mode {k}");
    }
}

/// Velocity Verlet on `ü = −V∗u`.
fn leapfrog(f: &ForceField, y: &PhaseField, t: f64, steps: usize) -> PhaseField {
    let dt = t / steps as f64;
    let (mut u, mut v) = (y.u.clone(), y.v.clone());
    let mut acc: Vec<f64> = f.apply(&u).iter().map(|a| -a).collect();
    for _ in 0..steps {
        for i in 0..u.len() {
            v[i] += 0.5 * dt * acc[i];
            u[i] += dt * v[i];
        }
        acc = f.apply(&u).iter().map(|a| -a).collect();
        for i in 0..u.len() {
            v[i] += 0.5 * dt * acc[i];
        }
    }
    PhaseField::new(*y.lattice(), u, v).unwrap()
}

#[test]
fn leapfrog_cross_oracle() {
    for f in [coupled(32), nn(2, 12, &[1.0], &[0.5])] {
        let table = DispersionTable::build(&f, None).unwrap();
        let len = f.lattice().sites() * f.lattice().components;
        let u: Vec<f64> = (0..len).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let v: Vec<f64> = (0..len).map(|i| ((i * 104729) % 11) as f64 / 11.0 - 0.5).collect();
        let y = PhaseField::new(*f.lattice(), u, v).unwrap();
        let exact = run(&table, &y, 1.0);
        let lf = leapfrog(&f, &y, 1.0, 2000);
        let err = max_diff(&exact.u, &lf.u).max(max_diff(&exact.v, &lf.v));
        assert!(err < 1e-4, "leapfrog gap {err:e}");
    }
}

#[test]
fn energy_examples() {
    let f = nn(1, 8, &[1.0], &[0.0]);
    let lat = *f.lattice();
    assert_eq!(energy(&PhaseField::zeros(lat), &f).unwrap(), 0.0);
    let y = PhaseField::new(lat, vec![0.0; 8], vec![0.3; 8]).unwrap();
    assert!((energy(&y, &f).unwrap() - 0.5 * 8.0 * 0.09).abs() < 1e-12);

    let mut u = vec![0.0; 8];
    u[0] = 1.0;
    let y = PhaseField::new(lat, u.clone(), vec![0.0; 8]).unwrap();
    let direct: f64 = 0.5 * (0..8).map(|x| (u[(x + 1) % 8] - u[x]).powi(2)).sum::<f64>();
    assert!((energy(&y, &f).unwrap() - 1.0).abs() < 1e-12);
    assert!((direct - 1.0).abs() < 1e-12);
}

#[test]
fn split_parts_sum_and_obey_parseval() {
    let f = nn(1, 512, &[1.0], &[1.0]);
    let table = DispersionTable::build(&f, None).unwrap();
    let m = 2;
    let mut previous: Option<f64> = None;
    for delta in [0.4, 0.2, 0.1] {
        let crit = CriticalSet::detect(&table, ConditionTolerances::default().hessian_tol, delta);
        let g = partition_weights(&crit, delta);
        let mut worst_over_t = 0.0f64;
        for t in [1.0, 10.0, 100.0] {
            let green = GreenFunction::compute(&table, t, Some(delta)).unwrap();
            for x in 0..table.points() {
                let (full, fp, gp) = (green.at(x), green.f_part(x).unwrap(), green.g_part(x).unwrap());
                for e in 0..m * m {
                    assert!((fp[e] + gp[e] - full[e]).abs() < 1e-10);
                }
            }
            let position: f64 = green.norms(GreenPart::F).unwrap().iter().map(|n| n * n).sum();
            let prop = PropagatorTable::build(&table, t).unwrap();
            let spectral: f64 = (0..table.points())
                .map(|k| ((1.0 - g[k]) * frobenius(&prop.matrix(k))).powi(2))
                .sum::<f64>()
                / table.points() as f64;
            assert!((position - spectral).abs() < 1e-10 * spectral.max(1.0), "{position} vs {spectral}");
            worst_over_t = worst_over_t.max(position);
        }
        if let Some(p) = previous {
            assert!(worst_over_t < p, "f-part mass did not shrink: {worst_over_t} >= {p}");
        }
        previous = Some(worst_over_t);
    }
}

#[test]
fn green_function_at_time_zero_is_a_delta() {
    let f = coupled(32);
    let table = DispersionTable::build(&f, None).unwrap();
    let green = GreenFunction::compute(&table, 0.0, None).unwrap();
    for x in 0..table.points() {
        for (e, val) in green.at(x).iter().enumerate() {
            let expect = if x == 0 && e % 5 == 0 { 1.0 } else { 0.0 };
            assert!((val - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn one_dimensional_decay_slope() {
    let f = nn(1, 2048, &[1.0], &[1.0]);
    let table = DispersionTable::build(&f, None).unwrap();
    let times: Vec<f64> = (0..8).map(|i| 10.0 * 10f64.powf(i as f64 / 7.0)).collect();
    let report = decay_diagnostic(&table, &times, 1.0).unwrap();
    assert!((report.slope + 0.5).abs() < 0.1, "slope {}", report.slope);
    assert!((report.gamma_g - 1.05 * table.max_speed()).abs() < 1e-12);
}
