//! Closed-form limits: the stationary covariance, Wigner matrices and their transport
//! along band characteristics, and the local covariance at kinetic scale.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::propagator_at;
use crate::grid::LatticeSpec;
use crate::lattice::DispersionTable;
use crate::linalg::{block_diag2, frobenius, join_blocks, split_blocks, CMat, MatField, I};
use crate::random_fields::{density_correlation, HomogeneousSpectrum, SlowProfile};

/// Agreement required between the two constructions of the local covariance.
pub const CROSS_CHECK_TOL: f64 = 1e-8;

fn half() -> Complex64 {
    Complex64::new(0.5, 0.0)
}

/// `Σ_σ diag(Π_σ, Π_σ) · M · diag(Π_σ, Π_σ)`.
fn band_project2(table: &DispersionTable, k: usize, m: &CMat) -> CMat {
    let mut out = CMat::zeros(m.nrows(), m.ncols());
    for b in 0..table.band_count(k) {
        let p = block_diag2(&table.projector(k, b));
        out += &p * m * &p;
    }
    out
}

/// `q̂_∞ = Σ_σ Π_σ M₀ Π_σ`, `M₀ = ½(q̂₀ + C q̂₀ C*)`, at one regular grid point.
pub fn limit_matrix(table: &DispersionTable, k: usize, q0: &CMat) -> Result<CMat> {
    let c = table.c_matrix(k)?;
    let m0 = (q0 + &c * q0 * c.adjoint()) * half();
    Ok(band_project2(table, k, &m0))
}

/// Stationary limit of the covariance on the dual grid; singular points are zero.
#[derive(Clone, Debug)]
pub struct LimitCovariance {
    lattice: LatticeSpec,
    pub data: MatField,
    pub masked: Vec<usize>,
}

impl LimitCovariance {
    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn matrix(&self, k: usize) -> CMat {
        self.data.get(k)
    }

    /// `q_∞(x)` at a lattice offset.
    pub fn correlation(&self, offset: &[i64]) -> CMat {
        density_correlation(&self.lattice, &self.data, offset)
    }

    pub fn to_spectrum(&self) -> Result<HomogeneousSpectrum> {
        HomogeneousSpectrum::new(self.lattice, self.data.clone())
    }
}

pub fn limit_covariance(q0: &HomogeneousSpectrum, table: &DispersionTable) -> Result<LimitCovariance> {
    table.lattice().ensure_same(q0.lattice())?;
    limit_of_field(table, q0.data())
}

/// [`limit_covariance`] for a bare matrix field, e.g. to apply the map twice.
pub fn limit_of_field(table: &DispersionTable, q0: &MatField) -> Result<LimitCovariance> {
    let lattice = *table.lattice();
    let m = 2 * lattice.components;
    let mats: Vec<Option<CMat>> = (0..lattice.sites())
        .into_par_iter()
        .map(|k| limit_matrix(table, k, &q0.get(k)).ok())
        .collect();
    let mut data = MatField::zeros(lattice.sites(), m, m);
    let mut masked = Vec::new();
    for (k, q) in mats.into_iter().enumerate() {
        match q {
            Some(q) => data.set(k, &q),
            None => masked.push(k),
        }
    }
    Ok(LimitCovariance {
        lattice,
        data,
        masked,
    })
}

/// Largest `‖Ĝ_t q̂ Ĝ_t* − q̂‖_F` over regular grid points.
pub fn stationarity_check(q: &MatField, table: &DispersionTable, t: f64) -> f64 {
    (0..table.points())
        .into_par_iter()
        .filter(|&k| !table.is_singular(k))
        .map(|k| {
            let g = propagator_at(table, k, t);
            let qk = q.get(k);
            frobenius(&(&g * &qk * g.adjoint() - qk))
        })
        .reduce(|| 0.0, f64::max)
}

/// `½(Ω^{1/2}R⁰⁰Ω^{1/2} + Ω^{-1/2}R¹¹Ω^{-1/2} + iΩ^{1/2}R⁰¹Ω^{-1/2} − iΩ^{-1/2}R¹⁰Ω^{1/2})`.
pub fn wigner_of_density(table: &DispersionTable, k: usize, r_hat: &CMat) -> Result<CMat> {
    table.ensure_regular(k)?;
    let s = table.apply_fn(k, |w| w.sqrt());
    let si = table.apply_fn(k, |w| 1.0 / w.sqrt());
    let b = split_blocks(r_hat);
    let w = &s * &b[0][0] * &s + &si * &b[1][1] * &si + (&s * &b[0][1] * &si) * I - (&si * &b[1][0] * &s) * I;
    Ok(w * half())
}

/// `W(0; r, θ_k)` on the grid; singular points are zero.
pub fn initial_wigner(profile: &dyn SlowProfile, table: &DispersionTable, r: &[f64]) -> MatField {
    let lat = *table.lattice();
    let n = lat.components;
    let mats: Vec<CMat> = (0..lat.sites())
        .into_par_iter()
        .map(|k| {
            wigner_of_density(table, k, &profile.evaluate(r, &lat.theta(k))).unwrap_or_else(|_| CMat::zeros(n, n))
        })
        .collect();
    let mut out = MatField::zeros(lat.sites(), n, n);
    for (k, m) in mats.iter().enumerate() {
        out.set(k, m);
    }
    out
}

fn back_traced(r: &[f64], v: &[f64], tau: f64) -> Vec<f64> {
    r.iter().zip(v).map(|(x, v)| x - tau * v).collect()
}

/// `W^p(τ; r, θ_k) = Σ_σ Π_σ W(0; r − τ∇ω_σ, θ_k) Π_σ` at one regular point.
pub fn projected_wigner_point(profile: &dyn SlowProfile, table: &DispersionTable, tau: f64, r: &[f64], k: usize) -> Result<CMat> {
    let lat = table.lattice();
    let th = lat.theta(k);
    let n = lat.components;
    let mut out = CMat::zeros(n, n);
    for b in 0..table.band_count(k) {
        let p = table.projector(k, b);
        let src = back_traced(r, table.velocity(k, b), tau);
        let w0 = wigner_of_density(table, k, &profile.evaluate(&src, &th))?;
        out += &p * w0 * &p;
    }
    Ok(out)
}

/// `W^p(τ; r, ·)` on the grid by exact characteristics; singular points are zero.
pub fn projected_wigner(profile: &dyn SlowProfile, table: &DispersionTable, tau: f64, r: &[f64]) -> MatField {
    let lat = *table.lattice();
    let n = lat.components;
    let mats: Vec<CMat> = (0..lat.sites())
        .into_par_iter()
        .map(|k| projected_wigner_point(profile, table, tau, r, k).unwrap_or_else(|_| CMat::zeros(n, n)))
        .collect();
    let mut out = MatField::zeros(lat.sites(), n, n);
    for (k, m) in mats.iter().enumerate() {
        out.set(k, m);
    }
    out
}

/// Periodic macroscopic grid `r_j = j·L/cells` on `[0, L)^d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RGrid {
    pub dim: usize,
    pub cells: usize,
    pub length: f64,
}

impl RGrid {
    pub fn new(dim: usize, cells: usize, length: f64) -> Result<Self> {
        if dim == 0 || cells < 2 || !(length > 0.0) {
            return Err(Error::InvalidParameter("r-grid needs dim >= 1, cells >= 2, length > 0".into()));
        }
        Ok(Self { dim, cells, length })
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.cells as f64
    }

    pub fn points(&self) -> usize {
        self.cells.pow(self.dim as u32)
    }

    pub fn multi(&self, mut j: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim];
        for a in (0..self.dim).rev() {
            out[a] = j % self.cells;
            j /= self.cells;
        }
        out
    }

    pub fn linear(&self, multi: &[i64]) -> usize {
        let c = self.cells as i64;
        multi.iter().fold(0usize, |acc, &m| acc * self.cells + m.rem_euclid(c) as usize)
    }

    pub fn position(&self, j: usize) -> Vec<f64> {
        let h = self.spacing();
        self.multi(j).into_iter().map(|m| m as f64 * h).collect()
    }

    /// Cell volume `h^d`.
    pub fn volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }
}

/// Band blocks `Π_σ W Π_σ` over `(θ_k, σ, r_j)`.
#[derive(Clone, Debug)]
pub struct TransportState {
    theta: LatticeSpec,
    pub rgrid: RGrid,
    pub tau: f64,
    band_offsets: Vec<usize>,
    /// `∇ω_σ(θ_k)` per band id.
    velocities: Vec<Vec<f64>>,
    masked: Vec<bool>,
    blocks: Vec<Complex64>,
}

impl TransportState {
    fn block_len(&self) -> usize {
        self.theta.components * self.theta.components
    }

    fn slot(&self, band_id: usize, j: usize) -> std::ops::Range<usize> {
        let b = self.block_len();
        let start = (band_id * self.rgrid.points() + j) * b;
        start..start + b
    }

    pub fn theta_lattice(&self) -> &LatticeSpec {
        &self.theta
    }

    pub fn band_count(&self, k: usize) -> usize {
        self.band_offsets[k + 1] - self.band_offsets[k]
    }

    pub fn is_masked(&self, k: usize) -> bool {
        self.masked[k]
    }

    /// Block of band `σ` at `(θ_k, r_j)`.
    pub fn block(&self, k: usize, band: usize, j: usize) -> CMat {
        let n = self.theta.components;
        let s = &self.blocks[self.slot(self.band_offsets[k] + band, j)];
        CMat::from_column_slice(n, n, s)
    }

    /// `Σ_σ` blocks at `(θ_k, r_j)`.
    pub fn wigner(&self, k: usize, j: usize) -> CMat {
        let n = self.theta.components;
        let mut out = CMat::zeros(n, n);
        for b in 0..self.band_count(k) {
            out += self.block(k, b, j);
        }
        out
    }

    /// `∫ dr ⨍ dθ tr W`, approximated on the grids.
    pub fn total_trace(&self) -> f64 {
        let n = self.theta.components;
        let per = self.block_len();
        let mut sum = 0.0;
        for chunk in self.blocks.chunks(per) {
            sum += (0..n).map(|i| chunk[i * n + i].re).sum::<f64>();
        }
        sum * self.rgrid.volume() / self.theta.sites() as f64
    }

    /// `∫ dr ⨍ dθ Σ_σ ‖block − other‖_F`.
    pub fn l1_distance(&self, other: &TransportState) -> Result<f64> {
        if self.rgrid != other.rgrid || self.blocks.len() != other.blocks.len() {
            return Err(Error::InvalidParameter("transport states live on different grids".into()));
        }
        let per = self.block_len();
        let sum: f64 = self
            .blocks
            .chunks(per)
            .zip(other.blocks.chunks(per))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt())
            .sum();
        Ok(sum * self.rgrid.volume() / self.theta.sites() as f64)
    }

    /// Largest `‖Π_σ B Π_σ − B‖_F` over all blocks.
    pub fn band_diagonal_error(&self, table: &DispersionTable) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.theta.sites() {
            for b in 0..self.band_count(k) {
                let p = table.projector(k, b);
                for j in 0..self.rgrid.points() {
                    let blk = self.block(k, b, j);
                    worst = worst.max(frobenius(&(&p * &blk * &p - blk)));
                }
            }
        }
        worst
    }

    fn map_bands(&self, tau: f64, f: impl Fn(&[Complex64], &[f64]) -> Vec<Complex64> + Sync) -> TransportState {
        let per = self.rgrid.points() * self.block_len();
        let bands = self.velocities.len();
        let new_blocks: Vec<Vec<Complex64>> = (0..bands)
            .into_par_iter()
            .map(|id| f(&self.blocks[id * per..(id + 1) * per], &self.velocities[id]))
            .collect();
        TransportState {
            theta: self.theta,
            rgrid: self.rgrid,
            tau: self.tau + tau,
            band_offsets: self.band_offsets.clone(),
            velocities: self.velocities.clone(),
            masked: self.masked.clone(),
            blocks: new_blocks.concat(),
        }
    }
}

/// `Π_σ W(0; r_j, θ_k) Π_σ` for every band, grid point and `r_j`.
pub fn project_wigner(
    w0: impl Fn(&[f64], usize) -> CMat + Sync,
    table: &DispersionTable,
    rgrid: RGrid,
) -> Result<TransportState> {
    let theta = *table.lattice();
    if rgrid.dim != theta.dim {
        return Err(Error::InvalidParameter("r-grid dimension differs from the lattice".into()));
    }
    let n = theta.components;
    let mut band_offsets = vec![0];
    let mut velocities = Vec::new();
    for k in 0..theta.sites() {
        for b in 0..table.band_count(k) {
            velocities.push(table.velocity(k, b).to_vec());
        }
        band_offsets.push(velocities.len());
    }
    let masked: Vec<bool> = (0..theta.sites()).map(|k| table.is_singular(k)).collect();
    let per_point: Vec<Vec<Complex64>> = (0..theta.sites())
        .into_par_iter()
        .map(|k| {
            let bands = table.band_count(k);
            let mut out = vec![Complex64::new(0.0, 0.0); bands * rgrid.points() * n * n];
            if masked[k] {
                return out;
            }
            let projectors: Vec<CMat> = (0..bands).map(|b| table.projector(k, b)).collect();
            for j in 0..rgrid.points() {
                let w = w0(&rgrid.position(j), k);
                for (b, p) in projectors.iter().enumerate() {
                    let blk = p * &w * p;
                    let start = (b * rgrid.points() + j) * n * n;
                    out[start..start + n * n].copy_from_slice(blk.as_slice());
                }
            }
            out
        })
        .collect();
    Ok(TransportState {
        theta,
        rgrid,
        tau: 0.0,
        band_offsets,
        velocities,
        masked,
        blocks: per_point.concat(),
    })
}

/// Projected initial Wigner matrix of a profile on an `r` grid.
pub fn project_profile(profile: &dyn SlowProfile, table: &DispersionTable, rgrid: RGrid) -> Result<TransportState> {
    let lat = *table.lattice();
    let n = lat.components;
    project_wigner(
        |r, k| wigner_of_density(table, k, &profile.evaluate(r, &lat.theta(k))).unwrap_or_else(|_| CMat::zeros(n, n)),
        table,
        rgrid,
    )
}

/// Exact characteristics: each block is the initial block at `r − τ∇ω_σ`, interpolated
/// multilinearly on the periodic `r` grid.
pub fn transport_evolve(state: &TransportState, tau: f64) -> TransportState {
    let rg = state.rgrid;
    let bl = state.block_len();
    state.map_bands(tau, |data, v| {
        let h = rg.spacing();
        // shift in cells per axis: source = j − τv/h
        let shifts: Vec<(i64, f64)> = v
            .iter()
            .map(|vi| {
                let s = -tau * vi / h;
                let fl = s.floor();
                (fl as i64, s - fl)
            })
            .collect();
        let corners = 1usize << rg.dim;
        let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
        for j in 0..rg.points() {
            let base: Vec<i64> = rg.multi(j).into_iter().map(|m| m as i64).collect();
            let dst = &mut out[j * bl..(j + 1) * bl];
            for c in 0..corners {
                let mut w = 1.0;
                let mut src = base.clone();
                for a in 0..rg.dim {
                    let (fl, frac) = shifts[a];
                    if (c >> a) & 1 == 1 {
                        src[a] += fl + 1;
                        w *= frac;
                    } else {
                        src[a] += fl;
                        w *= 1.0 - frac;
                    }
                }
                if w == 0.0 {
                    continue;
                }
                let s = rg.linear(&src);
                for (d, x) in dst.iter_mut().zip(&data[s * bl..(s + 1) * bl]) {
                    *d += x * w;
                }
            }
        }
        out
    })
}

/// First-order upwind finite volumes for `∂_τ f + ∇ω_σ·∇_r f = 0`, per band and `θ_k`,
/// with `Σ_i |v_i| Δτ / h ≤ cfl`.
pub fn transport_pde_oracle(state: &TransportState, tau: f64, cfl: f64) -> Result<TransportState> {
    if !(cfl > 0.0 && cfl <= 0.9) {
        return Err(Error::CflViolation(cfl));
    }
    let rg = state.rgrid;
    let bl = state.block_len();
    Ok(state.map_bands(tau, |data, v| {
        let h = rg.spacing();
        let speed: f64 = v.iter().map(|x| x.abs()).sum();
        if speed == 0.0 || tau == 0.0 {
            return data.to_vec();
        }
        let steps = (tau.abs() * speed / (cfl * h)).ceil().max(1.0) as usize;
        let dt = tau / steps as f64;
        let nu: Vec<f64> = v.iter().map(|vi| vi * dt / h).collect();
        let mut cur = data.to_vec();
        let mut next = vec![Complex64::new(0.0, 0.0); cur.len()];
        let neighbors: Vec<Vec<usize>> = (0..rg.points())
            .map(|j| {
                let base: Vec<i64> = rg.multi(j).into_iter().map(|m| m as i64).collect();
                (0..rg.dim)
                    .map(|a| {
                        let mut p = base.clone();
                        p[a] -= nu[a].signum() as i64;
                        rg.linear(&p)
                    })
                    .collect()
            })
            .collect();
        for _ in 0..steps {
            for j in 0..rg.points() {
                for e in 0..bl {
                    let here = cur[j * bl + e];
                    let mut val = here;
                    for a in 0..rg.dim {
                        let up = cur[neighbors[j][a] * bl + e];
                        val -= (here - up) * nu[a].abs();
                    }
                    next[j * bl + e] = val;
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }))
}

/// Local covariance `q̂_{τ,r}` on the dual grid; singular points are zero.
#[derive(Clone, Debug)]
pub struct LocalCovariance {
    lattice: LatticeSpec,
    pub tau: f64,
    pub r: Vec<f64>,
    pub data: MatField,
    pub masked: Vec<usize>,
    /// Largest blockwise discrepancy between the two constructions.
    pub cross_check: f64,
}

impl LocalCovariance {
    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn matrix(&self, k: usize) -> CMat {
        self.data.get(k)
    }

    pub fn correlation(&self, offset: &[i64]) -> CMat {
        density_correlation(&self.lattice, &self.data, offset)
    }

    /// Largest `‖Ω q̂⁰⁰ − Ω⁻¹ q̂¹¹‖_F` over regular points.
    pub fn equipartition_defect(&self, table: &DispersionTable) -> f64 {
        (0..self.lattice.sites())
            .filter(|k| !table.is_singular(*k))
            .map(|k| {
                let b = split_blocks(&self.data.get(k));
                let lhs = table.omega(k) * &b[0][0];
                let rhs = table.apply_fn(k, |w| 1.0 / w) * &b[1][1];
                frobenius(&(lhs - rhs))
            })
            .fold(0.0, f64::max)
    }

    /// Largest `‖q̂⁰¹ + q̂¹⁰‖_F`.
    pub fn antisymmetry_defect(&self) -> f64 {
        (0..self.lattice.sites())
            .map(|k| {
                let b = split_blocks(&self.data.get(k));
                frobenius(&(&b[0][1] + &b[1][0]))
            })
            .fold(0.0, f64::max)
    }
}

/// Local covariance from `W^p` (reference construction).
pub fn local_covariance_from_wigner(
    profile: &dyn SlowProfile,
    table: &DispersionTable,
    tau: f64,
    r: &[f64],
    k: usize,
) -> Result<CMat> {
    let lat = table.lattice();
    let mk = lat.negate(k);
    let wp = projected_wigner_point(profile, table, tau, r, k)?;
    let wm = projected_wigner_point(profile, table, tau, r, mk)?.map(|z| z.conj());
    let sym = (&wp + &wm) * half();
    let anti = (&wp - &wm) * (-I * 0.5);
    let q00 = table.apply_fn(k, |w| 1.0 / w) * &sym;
    let q11 = table.omega(k) * &sym;
    Ok(join_blocks(&[[q00, anti.clone()], [-anti, q11]]))
}

/// Local covariance from the symmetrised and antisymmetrised back-traced densities.
pub fn local_covariance_from_densities(
    profile: &dyn SlowProfile,
    table: &DispersionTable,
    tau: f64,
    r: &[f64],
    k: usize,
) -> Result<CMat> {
    let lat = table.lattice();
    let th = lat.theta(k);
    let c = table.c_matrix(k)?;
    let cs = c.adjoint();
    let m = 2 * lat.components;
    let mut out = CMat::zeros(m, m);
    for b in 0..table.band_count(k) {
        let v = table.velocity(k, b);
        let fwd: Vec<f64> = r.iter().zip(v).map(|(x, v)| x + tau * v).collect();
        let bwd = back_traced(r, v, tau);
        let (rf, rb) = (profile.evaluate(&fwd, &th), profile.evaluate(&bwd, &th));
        let rp = (&rf + &rb) * half();
        let rm = (&rf - &rb) * half();
        let mp = (&rp + &c * &rp * &cs) * half();
        let mm = (&c * &rm - &rm * &cs) * (I * 0.5);
        let p = block_diag2(&table.projector(k, b));
        out += &p * (mp + mm) * &p;
    }
    Ok(out)
}

/// `q̂_{τ,r}` built both ways; disagreement beyond [`CROSS_CHECK_TOL`] is an error.
pub fn local_covariance(profile: &dyn SlowProfile, table: &DispersionTable, tau: f64, r: &[f64]) -> Result<LocalCovariance> {
    let lat = *table.lattice();
    if r.len() != lat.dim {
        return Err(Error::InvalidParameter(format!("r must have {} coordinates", lat.dim)));
    }
    let m = 2 * lat.components;
    let results: Vec<Result<Option<(CMat, f64)>>> = (0..lat.sites())
        .into_par_iter()
        .map(|k| {
            if table.is_singular(k) || table.is_singular(lat.negate(k)) {
                return Ok(None);
            }
            let reference = local_covariance_from_wigner(profile, table, tau, r, k)?;
            let check = local_covariance_from_densities(profile, table, tau, r, k)?;
            let scale = frobenius(&reference).max(1.0);
            Ok(Some((reference.clone(), frobenius(&(reference - check)) / scale)))
        })
        .collect();
    let mut data = MatField::zeros(lat.sites(), m, m);
    let mut masked = Vec::new();
    let mut worst: f64 = 0.0;
    for (k, res) in results.into_iter().enumerate() {
        match res? {
            Some((q, err)) => {
                worst = worst.max(err);
                data.set(k, &q);
            }
            None => masked.push(k),
        }
    }
    if worst > CROSS_CHECK_TOL {
        return Err(Error::CrossCheck(format!(
            "local covariance constructions differ by {worst:e} (relative)"
        )));
    }
    Ok(LocalCovariance {
        lattice: lat,
        tau,
        r: r.to_vec(),
        data,
        masked,
        cross_check: worst,
    })
}
