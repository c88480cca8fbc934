//! Force fields, their Fourier symbols, band structure and the model conditions.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::LatticeSpec;
use crate::linalg::{hermitian_eigen, CMat, MatField};

/// Eigenvalues of `V̂` in `[-E3_FLOOR, 0)` are treated as rounding and clamped to zero.
pub const E3_FLOOR: f64 = 1e-10;
/// Band frequencies below this are singular: no `Ω^{-1}` or `Ω^{-1/2}` there.
pub const SINGULAR_TOL: f64 = 1e-8;
/// Relative degeneracy tolerance, multiplied by the largest frequency on the grid.
pub const DEGENERACY_REL: f64 = 1e-8;

/// Finitely supported, even coupling matrices `V(z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceField {
    lattice: LatticeSpec,
    entries: BTreeMap<Vec<i64>, DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ForceFieldFile {
    d: usize,
    n: usize,
    #[serde(rename = "N")]
    side: usize,
    entries: Vec<EntryFile>,
}

#[derive(Serialize, Deserialize)]
struct EntryFile {
    offset: Vec<i64>,
    matrix: Vec<Vec<f64>>,
}

impl ForceField {
    /// Builds a field from explicit offsets. Shapes are checked here; evenness is
    /// reported by [`validate_conditions`] and enforced when building a dispersion table.
    pub fn new(lattice: LatticeSpec, entries: Vec<(Vec<i64>, DMatrix<f64>)>) -> Result<Self> {
        let n = lattice.components;
        let mut map = BTreeMap::new();
        for (offset, m) in entries {
            if offset.len() != lattice.dim {
                return Err(Error::InvalidParameter(format!(
                    "offset {offset:?} has wrong dimension (expected {})",
                    lattice.dim
                )));
            }
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::InvalidParameter(format!(
                    "matrix at offset {offset:?} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "non-finite entry at offset {offset:?}"
                )));
            }
            if map.insert(offset.clone(), m).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate offset {offset:?}")));
            }
        }
        Ok(Self {
            lattice,
            entries: map,
        })
    }

    /// Nearest-neighbour coupling `Σ_k Σ_x (Σ_i γ_k |u_k(x+e_i) − u_k(x)|² + m_k² |u_k(x)|²)`.
    pub fn nearest_neighbor(lattice: LatticeSpec, gammas: &[f64], masses: &[f64]) -> Result<Self> {
        let n = lattice.components;
        if gammas.len() != n || masses.len() != n {
            return Err(Error::InvalidParameter(format!(
                "need {n} couplings and masses, got {} and {}",
                gammas.len(),
                masses.len()
            )));
        }
        if let Some(g) = gammas.iter().find(|&&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidParameter(format!("coupling must be positive, got {g}")));
        }
        if let Some(m) = masses.iter().find(|&&m| !(m >= 0.0 && m.is_finite())) {
            return Err(Error::InvalidParameter(format!("mass must be nonnegative, got {m}")));
        }
        let d = lattice.dim;
        let onsite = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                2.0 * d as f64 * gammas[i] + masses[i] * masses[i]
            } else {
                0.0
            }
        });
        let hop = DMatrix::from_fn(n, n, |i, j| if i == j { -gammas[i] } else { 0.0 });
        let mut entries = vec![(vec![0; d], onsite)];
        for axis in 0..d {
            for sign in [1, -1] {
                let mut z = vec![0; d];
                z[axis] = sign;
                entries.push((z, hop.clone()));
            }
        }
        Self::new(lattice, entries)
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Vec<i64>, &DMatrix<f64>)> {
        self.entries.iter()
    }

    pub fn matrix(&self, offset: &[i64]) -> Option<&DMatrix<f64>> {
        self.entries.get(offset)
    }

    /// Largest `|z|_∞` over stored offsets.
    pub fn support_radius(&self) -> i64 {
        self.entries
            .keys()
            .flat_map(|z| z.iter().map(|c| c.abs()))
            .max()
            .unwrap_or(0)
    }

    /// First stored offset violating `V(−z) = V(z)ᵀ`, if any.
    pub fn evenness_violation(&self) -> Option<Vec<i64>> {
        for (z, m) in &self.entries {
            let neg: Vec<i64> = z.iter().map(|c| -c).collect();
            match self.entries.get(&neg) {
                Some(mn) if *mn == m.transpose() => {}
                _ => return Some(z.clone()),
            }
        }
        None
    }

    /// `V̂(θ) = Σ_z V(z) e^{iz·θ}`, symmetrised to remove rounding in the imaginary diagonal.
    pub fn symbol(&self, theta: &[f64]) -> CMat {
        let n = self.lattice.components;
        let mut out = CMat::zeros(n, n);
        for (z, m) in &self.entries {
            let phase: f64 = z.iter().zip(theta).map(|(&c, &t)| c as f64 * t).sum();
            let e = Complex64::from_polar(1.0, phase);
            for j in 0..n {
                for i in 0..n {
                    out[(i, j)] += e * m[(i, j)];
                }
            }
        }
        crate::linalg::hermitian_part(&out)
    }

    /// Band data at an arbitrary wavenumber.
    pub fn spectral_point(&self, theta: &[f64], degeneracy_tol: f64) -> Result<SpectralPoint> {
        let vhat = self.symbol(theta);
        SpectralPoint::from_symbol(&vhat, degeneracy_tol).map_err(|low| {
            Error::ModelInvalid(format!(
                "symbol has negative eigenvalue {low:e} at theta = {theta:?}"
            ))
        })
    }

    /// `(V u)(x) = Σ_z V(z) u(x − z)` on the torus; `u` is laid out `[site][component]`.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let lat = &self.lattice;
        let n = lat.components;
        let mut out = vec![0.0; u.len()];
        for x in 0..lat.sites() {
            let xs: Vec<i64> = lat.multi_index(x).into_iter().map(|c| c as i64).collect();
            for (z, m) in &self.entries {
                let src: Vec<i64> = xs.iter().zip(z).map(|(a, b)| a - b).collect();
                let y = lat.wrap_index(&src);
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += m[(i, j)] * u[y * n + j];
                    }
                    out[x * n + i] += acc;
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ForceFieldFile {
            d: self.lattice.dim,
            n: self.lattice.components,
            side: self.lattice.side,
            entries: self
                .entries
                .iter()
                .map(|(z, m)| EntryFile {
                    offset: z.clone(),
                    matrix: (0..m.nrows())
                        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                        .collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ForceFieldFile = serde_json::from_str(text)?;
        let lattice = LatticeSpec::new(file.d, file.n, file.side)?;
        let mut entries = Vec::with_capacity(file.entries.len());
        for e in file.entries {
            if e.matrix.len() != file.n || e.matrix.iter().any(|r| r.len() != file.n) {
                return Err(Error::InvalidParameter(format!(
                    "matrix at offset {:?} is not {}x{}",
                    e.offset, file.n, file.n
                )));
            }
            let m = DMatrix::from_fn(file.n, file.n, |i, j| e.matrix[i][j]);
            entries.push((e.offset, m));
        }
        Self::new(lattice, entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// A group of (numerically) degenerate eigenvalues forming one band at one grid point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandGroup {
    /// Range of sorted eigenvalue indices belonging to the band.
    pub lo: usize,
    pub hi: usize,
    pub freq: f64,
}

impl BandGroup {
    pub fn multiplicity(&self) -> usize {
        self.hi - self.lo
    }
}

/// Band decomposition of `Ω = V̂^{1/2}` at a single wavenumber.
#[derive(Clone, Debug)]
pub struct SpectralPoint {
    /// Sorted eigenvalues of `V̂` after clamping.
    pub eigenvalues: Vec<f64>,
    pub vectors: CMat,
    pub bands: Vec<BandGroup>,
}

impl SpectralPoint {
    /// Err carries the offending eigenvalue when `V̂` is not PSD within [`E3_FLOOR`].
    fn from_symbol(vhat: &CMat, degeneracy_tol: f64) -> std::result::Result<Self, f64> {
        let (mut values, vectors) = hermitian_eigen(vhat);
        let scale = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        if values[0] < -E3_FLOOR * scale {
            return Err(values[0]);
        }
        for v in values.iter_mut() {
            *v = v.max(0.0);
        }
        let freqs: Vec<f64> = values.iter().map(|v| v.sqrt()).collect();
        Ok(Self {
            bands: group_bands(&freqs, degeneracy_tol),
            eigenvalues: values,
            vectors,
        })
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn projector(&self, band: usize) -> CMat {
        projector_from(&self.vectors, &self.bands[band])
    }

    /// `Σ_σ f(ω_σ) Π_σ`.
    pub fn apply_fn(&self, f: impl Fn(f64) -> f64) -> CMat {
        apply_fn_from(&self.vectors, &self.bands, f)
    }

    pub fn min_freq(&self) -> f64 {
        self.bands.first().map(|b| b.freq).unwrap_or(0.0)
    }
}

fn group_bands(freqs: &[f64], tol: f64) -> Vec<BandGroup> {
    let mut bands = Vec::new();
    let mut lo = 0;
    for i in 1..=freqs.len() {
        if i == freqs.len() || freqs[i] - freqs[i - 1] >= tol {
            let freq = freqs[lo..i].iter().sum::<f64>() / (i - lo) as f64;
            bands.push(BandGroup { lo, hi: i, freq });
            lo = i;
        }
    }
    bands
}

fn projector_from(vectors: &CMat, band: &BandGroup) -> CMat {
    let n = vectors.nrows();
    let mut p = CMat::zeros(n, n);
    for i in band.lo..band.hi {
        let v = vectors.column(i);
        p += &v * v.adjoint();
    }
    p
}

fn apply_fn_from(vectors: &CMat, bands: &[BandGroup], f: impl Fn(f64) -> f64) -> CMat {
    let n = vectors.nrows();
    let mut out = CMat::zeros(n, n);
    for b in bands {
        let w = f(b.freq);
        if w == 0.0 {
            continue;
        }
        for i in b.lo..b.hi {
            let v = vectors.column(i);
            out += (&v * v.adjoint()).scale(w);
        }
    }
    out
}

/// Band structure of a force field sampled on the dual grid.
#[derive(Clone, Debug)]
pub struct DispersionTable {
    lattice: LatticeSpec,
    degeneracy_tol: f64,
    singular_tol: f64,
    vhat: MatField,
    vectors: MatField,
    eigenvalues: Vec<f64>,
    band_offsets: Vec<usize>,
    bands: Vec<BandGroup>,
    velocity: Vec<f64>,
    second: Vec<f64>,
    hessian_det: Vec<f64>,
    max_freq: f64,
}

impl DispersionTable {
    /// Eigendecomposes `V̂` on every grid point, groups bands, and differentiates them
    /// by central differences on the dual grid. `None` selects the default degeneracy
    /// tolerance `1e-8 · max ω`.
    pub fn build(field: &ForceField, degeneracy_tol: Option<f64>) -> Result<Self> {
        if let Some(z) = field.evenness_violation() {
            return Err(Error::ModelInvalid(format!(
                "V(-z) != V(z)^T at offset {z:?}"
            )));
        }
        let lat = *field.lattice();
        let n = lat.components;
        let points = lat.sites();
        let raw: Vec<(CMat, Vec<f64>, CMat)> = (0..points)
            .into_par_iter()
            .map(|k| {
                let vhat = field.symbol(&lat.theta(k));
                let (vals, vecs) = hermitian_eigen(&vhat);
                (vhat, vals, vecs)
            })
            .collect();

        let mut eigenvalues = vec![0.0; points * n];
        let mut vhat = MatField::zeros(points, n, n);
        let mut vectors = MatField::zeros(points, n, n);
        let mut max_freq: f64 = 0.0;
        for (k, (vh, vals, vecs)) in raw.into_iter().enumerate() {
            let scale = vals.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            if vals[0] < -E3_FLOOR * scale {
                return Err(Error::ModelInvalid(format!(
                    "E3 violated: V-hat has eigenvalue {:e} at theta = {:?}",
                    vals[0],
                    lat.theta(k)
                )));
            }
            for (i, v) in vals.iter().enumerate() {
                eigenvalues[k * n + i] = v.max(0.0);
            }
            max_freq = max_freq.max(vals[n - 1].max(0.0).sqrt());
            vhat.set(k, &vh);
            vectors.set(k, &vecs);
        }
        let degeneracy_tol = degeneracy_tol.unwrap_or(DEGENERACY_REL * max_freq.max(f64::MIN_POSITIVE));

        let freq_of = |k: usize, i: usize| eigenvalues[k * n + i].sqrt();
        let mut band_offsets = Vec::with_capacity(points + 1);
        let mut bands = Vec::new();
        band_offsets.push(0);
        for k in 0..points {
            let freqs: Vec<f64> = (0..n).map(|i| freq_of(k, i)).collect();
            bands.extend(group_bands(&freqs, degeneracy_tol));
            band_offsets.push(bands.len());
        }

        // Derivatives per sorted eigenvalue index, then averaged over each band's members.
        let d = lat.dim;
        let h = lat.dual_spacing();
        let per_point: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..points)
            .into_par_iter()
            .map(|k| {
                let mut vel = Vec::new();
                let mut sec = Vec::new();
                let mut det = Vec::new();
                for b in &bands[band_offsets[k]..band_offsets[k + 1]] {
                    let mut grad = vec![0.0; d];
                    let mut hess = DMatrix::<f64>::zeros(d, d);
                    for i in b.lo..b.hi {
                        for a in 0..d {
                            let p = lat.shift(k, a, 1);
                            let m = lat.shift(k, a, -1);
                            grad[a] += (freq_of(p, i) - freq_of(m, i)) / (2.0 * h);
                            hess[(a, a)] +=
                                (freq_of(p, i) - 2.0 * freq_of(k, i) + freq_of(m, i)) / (h * h);
                            for c in (a + 1)..d {
                                let pp = lat.shift(p, c, 1);
                                let pm = lat.shift(p, c, -1);
                                let mp = lat.shift(m, c, 1);
                                let mm = lat.shift(m, c, -1);
                                let mixed = (freq_of(pp, i) - freq_of(pm, i) - freq_of(mp, i)
                                    + freq_of(mm, i))
                                    / (4.0 * h * h);
                                hess[(a, c)] += mixed;
                                hess[(c, a)] += mixed;
                            }
                        }
                    }
                    let mult = b.multiplicity() as f64;
                    grad.iter_mut().for_each(|g| *g /= mult);
                    hess /= mult;
                    vel.extend(grad);
                    sec.extend((0..d).map(|a| hess[(a, a)]));
                    det.push(hess.determinant());
                }
                (vel, sec, det)
            })
            .collect();
        let mut velocity = Vec::with_capacity(bands.len() * d);
        let mut second = Vec::with_capacity(bands.len() * d);
        let mut hessian_det = Vec::with_capacity(bands.len());
        for (v, s, dt) in per_point {
            velocity.extend(v);
            second.extend(s);
            hessian_det.extend(dt);
        }

        Ok(Self {
            lattice: lat,
            degeneracy_tol,
            singular_tol: SINGULAR_TOL,
            vhat,
            vectors,
            eigenvalues,
            band_offsets,
            bands,
            velocity,
            second,
            hessian_det,
            max_freq,
        })
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn points(&self) -> usize {
        self.lattice.sites()
    }

    pub fn components(&self) -> usize {
        self.lattice.components
    }

    pub fn degeneracy_tol(&self) -> f64 {
        self.degeneracy_tol
    }

    pub fn singular_tol(&self) -> f64 {
        self.singular_tol
    }

    pub fn max_freq(&self) -> f64 {
        self.max_freq
    }

    pub fn vhat(&self, k: usize) -> CMat {
        self.vhat.get(k)
    }

    /// Sorted, clamped eigenvalues of `V̂(θ_k)`.
    pub fn symbol_eigenvalues(&self, k: usize) -> &[f64] {
        let n = self.components();
        &self.eigenvalues[k * n..(k + 1) * n]
    }

    pub fn bands(&self, k: usize) -> &[BandGroup] {
        &self.bands[self.band_offsets[k]..self.band_offsets[k + 1]]
    }

    pub fn band_count(&self, k: usize) -> usize {
        self.band_offsets[k + 1] - self.band_offsets[k]
    }

    pub fn max_band_count(&self) -> usize {
        (0..self.points()).map(|k| self.band_count(k)).max().unwrap_or(0)
    }

    pub fn freq(&self, k: usize, band: usize) -> f64 {
        self.bands(k)[band].freq
    }

    fn band_id(&self, k: usize, band: usize) -> usize {
        self.band_offsets[k] + band
    }

    /// Finite-difference group velocity `∇ω_σ(θ_k)`.
    pub fn velocity(&self, k: usize, band: usize) -> &[f64] {
        let d = self.lattice.dim;
        let id = self.band_id(k, band);
        &self.velocity[id * d..(id + 1) * d]
    }

    /// Diagonal second derivatives `∂²ω_σ/∂θ_i²`.
    pub fn second_derivatives(&self, k: usize, band: usize) -> &[f64] {
        let d = self.lattice.dim;
        let id = self.band_id(k, band);
        &self.second[id * d..(id + 1) * d]
    }

    pub fn hessian_det(&self, k: usize, band: usize) -> f64 {
        self.hessian_det[self.band_id(k, band)]
    }

    pub fn projector(&self, k: usize, band: usize) -> CMat {
        projector_from(&self.vectors.get(k), &self.bands(k)[band])
    }

    /// `Σ_σ f(ω_σ(θ_k)) Π_σ(θ_k)`.
    pub fn apply_fn(&self, k: usize, f: impl Fn(f64) -> f64) -> CMat {
        apply_fn_from(&self.vectors.get(k), self.bands(k), f)
    }

    pub fn omega(&self, k: usize) -> CMat {
        self.apply_fn(k, |w| w)
    }

    pub fn min_freq(&self, k: usize) -> f64 {
        self.bands(k)[0].freq
    }

    pub fn is_singular(&self, k: usize) -> bool {
        self.min_freq(k) < self.singular_tol
    }

    pub fn singular_points(&self) -> Vec<usize> {
        (0..self.points()).filter(|&k| self.is_singular(k)).collect()
    }

    pub fn max_speed(&self) -> f64 {
        let d = self.lattice.dim;
        self.velocity
            .chunks(d)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Largest band speed over the given grid points.
    pub fn max_speed_on(&self, points: impl Iterator<Item = usize>) -> f64 {
        let mut best: f64 = 0.0;
        for k in points {
            for b in 0..self.band_count(k) {
                let v = self.velocity(k, b);
                best = best.max(v.iter().map(|x| x * x).sum::<f64>().sqrt());
            }
        }
        best
    }

    /// `C(θ) = [[0, Ω^{-1}], [−Ω, 0]]`. Requires a nonsingular point.
    pub fn c_matrix(&self, k: usize) -> Result<CMat> {
        self.ensure_regular(k)?;
        let n = self.components();
        let mut c = CMat::zeros(2 * n, 2 * n);
        c.view_mut((0, n), (n, n)).copy_from(&self.apply_fn(k, |w| 1.0 / w));
        c.view_mut((n, 0), (n, n)).copy_from(&(-self.omega(k)));
        Ok(c)
    }

    pub(crate) fn ensure_regular(&self, k: usize) -> Result<()> {
        if self.is_singular(k) {
            return Err(Error::SingularMode {
                index: k,
                theta: self.lattice.theta(k),
                omega: self.min_freq(k),
            });
        }
        Ok(())
    }
}

/// Pass/fail outcome of one model condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionStatus {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub condition: String,
    pub status: ConditionStatus,
    pub witness_index: Option<usize>,
    pub witness_theta: Option<Vec<f64>>,
    pub margin: Option<f64>,
    pub note: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionReport {
    pub lattice: LatticeSpec,
    pub records: Vec<ConditionRecord>,
    /// Grid points excluded from inverse-frequency constructions.
    pub singular_points: Vec<usize>,
}

impl ConditionReport {
    pub fn record(&self, name: &str) -> Option<&ConditionRecord> {
        self.records.iter().find(|r| r.condition == name)
    }

    pub fn status(&self, name: &str) -> ConditionStatus {
        self.record(name)
            .map(|r| r.status)
            .unwrap_or(ConditionStatus::NotApplicable)
    }

    /// The model is usable iff evenness and positivity hold.
    pub fn is_valid(&self) -> bool {
        self.status("E2") == ConditionStatus::Pass && self.status("E3") == ConditionStatus::Pass
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConditionTolerances {
    /// `|D_σ|` below this counts as a degenerate Hessian.
    pub hessian_tol: f64,
    /// E4 fails when at least this fraction of the grid has a degenerate Hessian.
    pub e4_max_fraction: f64,
    /// E5 fails when the variance of `ω_σ ± ω_σ'` drops below this.
    pub e5_min_variance: f64,
    /// E6 is judged divergent when grid refinement stops contracting the increments
    /// of the averaged `‖V̂^{-1}‖` (ratio of successive increments above this).
    pub e6_increment_ratio: f64,
}

impl Default for ConditionTolerances {
    fn default() -> Self {
        Self {
            hessian_tol: 1e-8,
            e4_max_fraction: 0.5,
            e5_min_variance: 1e-12,
            e6_increment_ratio: 0.75,
        }
    }
}

fn record(
    lat: &LatticeSpec,
    condition: &str,
    status: ConditionStatus,
    witness: Option<usize>,
    margin: Option<f64>,
    note: impl Into<String>,
) -> ConditionRecord {
    ConditionRecord {
        condition: condition.into(),
        status,
        witness_index: witness,
        witness_theta: witness.map(|k| lat.theta(k)),
        margin,
        note: note.into(),
    }
}

/// Checks E1–E6. Table-based checks are skipped when `table` is `None`
/// (for instance because the field is not even).
pub fn validate_conditions(
    field: &ForceField,
    table: Option<&DispersionTable>,
    tol: &ConditionTolerances,
) -> ConditionReport {
    use ConditionStatus::*;
    let lat = *field.lattice();
    let mut records = Vec::new();

    records.push(record(
        &lat,
        "E1",
        Pass,
        None,
        Some(field.support_radius() as f64),
        "finite support radius",
    ));
    records.push(match field.evenness_violation() {
        None => record(&lat, "E2", Pass, None, None, "V(-z) = V(z)^T for every offset"),
        Some(z) => record(&lat, "E2", Fail, None, None, format!("violated at offset {z:?}")),
    });

    // E3 does not need the table; a field failing E2 can still be probed on the grid.
    let mut worst = (f64::INFINITY, 0usize);
    for k in 0..lat.sites() {
        let low = crate::linalg::min_eigenvalue(&field.symbol(&lat.theta(k)));
        if low < worst.0 {
            worst = (low, k);
        }
    }
    let scale = 1.0f64.max(worst.0.abs());
    records.push(record(
        &lat,
        "E3",
        if worst.0 >= -E3_FLOOR * scale { Pass } else { Fail },
        Some(worst.1),
        Some(worst.0),
        "minimum eigenvalue of V-hat over the grid",
    ));

    let Some(table) = table else {
        for c in ["E4", "E5", "E6"] {
            records.push(record(&lat, c, NotApplicable, None, None, "no dispersion table"));
        }
        return ConditionReport {
            lattice: lat,
            records,
            singular_points: Vec::new(),
        };
    };

    records.push(check_e4(table, tol));
    records.push(check_e5(table, tol));
    records.push(check_e6(table, tol));

    ConditionReport {
        lattice: lat,
        records,
        singular_points: table.singular_points(),
    }
}

fn check_e4(table: &DispersionTable, tol: &ConditionTolerances) -> ConditionRecord {
    let lat = table.lattice();
    let mut flat = 0usize;
    let mut witness = None;
    for k in 0..table.points() {
        let degenerate = (0..table.band_count(k)).any(|b| table.hessian_det(k, b).abs() < tol.hessian_tol);
        if degenerate {
            flat += 1;
            witness.get_or_insert(k);
        }
    }
    let fraction = flat as f64 / table.points() as f64;
    record(
        lat,
        "E4",
        if fraction < tol.e4_max_fraction {
            ConditionStatus::Pass
        } else {
            ConditionStatus::Fail
        },
        witness,
        Some(fraction),
        "fraction of grid with |D_sigma| below tolerance",
    )
}

fn check_e5(table: &DispersionTable, tol: &ConditionTolerances) -> ConditionRecord {
    let lat = table.lattice();
    let s = table.max_band_count();
    if s < 2 {
        return record(
            lat,
            "E5",
            ConditionStatus::Pass,
            None,
            None,
            "single band: holds trivially",
        );
    }
    let generic: Vec<usize> = (0..table.points())
        .filter(|&k| table.band_count(k) == s)
        .collect();
    let mut min_var = f64::INFINITY;
    for a in 0..s {
        for b in (a + 1)..s {
            for sign in [1.0, -1.0] {
                let vals: Vec<f64> = generic
                    .iter()
                    .map(|&k| table.freq(k, a) + sign * table.freq(k, b))
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                min_var = min_var.min(var);
            }
        }
    }
    record(
        lat,
        "E5",
        if min_var >= tol.e5_min_variance {
            ConditionStatus::Pass
        } else {
            ConditionStatus::Fail
        },
        None,
        Some(min_var),
        "minimum variance of omega_sigma +- omega_sigma' over generic points",
    )
}

fn check_e6(table: &DispersionTable, tol: &ConditionTolerances) -> ConditionRecord {
    let lat = table.lattice();
    let floor = table.singular_tol().powi(2);
    let inv_norm = |k: usize| {
        let low = table.symbol_eigenvalues(k)[0];
        (low > floor).then(|| 1.0 / low)
    };
    let singular = table.singular_points();
    // Average of ‖V̂^{-1}‖ over unmasked points of the grid subsampled by `stride`.
    let average = |stride: usize| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for k in 0..table.points() {
            if lat.multi_index(k).iter().all(|c| c % stride == 0) {
                if let Some(v) = inv_norm(k) {
                    sum += v;
                    count += 1;
                }
            }
        }
        sum / count.max(1) as f64
    };
    let full = average(1);
    if singular.is_empty() {
        return record(
            lat,
            "E6",
            ConditionStatus::Pass,
            None,
            Some(full),
            "no singular grid points; ||V-hat^-1|| bounded",
        );
    }
    let witness = Some(singular[0]);
    if lat.side < 16 {
        return record(
            lat,
            "E6",
            ConditionStatus::NotApplicable,
            witness,
            Some(full),
            "grid too coarse for a refinement test",
        );
    }
    let half = average(2);
    let quarter = average(4);
    let fine_step = full - half;
    let coarse_step = half - quarter;
    let ratio = if coarse_step.abs() <= 1e-12 * full.abs() {
        0.0
    } else {
        fine_step / coarse_step
    };
    record(
        lat,
        "E6",
        if ratio < tol.e6_increment_ratio {
            ConditionStatus::Pass
        } else {
            ConditionStatus::Fail
        },
        witness,
        Some(ratio),
        format!(
            "grid average of ||V-hat^-1|| over {} unmasked points: {full:.6e}; \
             refinement increment ratio {ratio:.3} (divergent when >= {})",
            table.points() - singular.len(),
            tol.e6_increment_ratio
        ),
    )
}

/// Grid points where smooth band analysis breaks down, with distances to them.
#[derive(Clone, Debug)]
pub struct CriticalSet {
    /// Grid points flagged directly: crossings, flat Hessians, vanishing second
    /// derivatives (including sign changes between neighbours) and `C₀`.
    pub seeds: Vec<usize>,
    /// Periodic Euclidean distance in θ to the nearest seed, `∞` beyond `radius`.
    pub distance: Vec<f64>,
    pub radius: f64,
}

impl CriticalSet {
    pub fn detect(table: &DispersionTable, hessian_tol: f64, radius: f64) -> Self {
        let seeds = critical_seeds(table, hessian_tol);
        let distance = distance_to(table.lattice(), &seeds, radius);
        Self {
            seeds,
            distance,
            radius,
        }
    }

    /// Points within `δ ≤ radius` of a seed.
    pub fn mask(&self, delta: f64) -> Vec<bool> {
        assert!(delta <= self.radius + 1e-12, "delta exceeds computed radius");
        self.distance.iter().map(|&d| d <= delta).collect()
    }
}

/// Boolean mask of grid points within dual-grid distance `δ` of the critical set.
pub fn critical_set_mask(table: &DispersionTable, delta: f64) -> Result<Vec<bool>> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    Ok(CriticalSet::detect(table, ConditionTolerances::default().hessian_tol, delta).mask(delta))
}

fn critical_seeds(table: &DispersionTable, tol: f64) -> Vec<usize> {
    let lat = table.lattice();
    let d = lat.dim;
    let s_max = table.max_band_count();
    let mut flagged = vec![false; table.points()];
    for k in 0..table.points() {
        if table.band_count(k) < s_max || table.is_singular(k) {
            flagged[k] = true;
            continue;
        }
        for b in 0..s_max {
            let det = table.hessian_det(k, b);
            let sec = table.second_derivatives(k, b);
            if det.abs() < tol || sec.iter().any(|s| s.abs() < tol) {
                flagged[k] = true;
            }
            for a in 0..d {
                let nb = lat.shift(k, a, 1);
                if table.band_count(nb) != s_max {
                    continue;
                }
                let det_nb = table.hessian_det(nb, b);
                let sec_nb = table.second_derivatives(nb, b);
                let flips = (det * det_nb < 0.0)
                    || (0..d).any(|i| sec[i] * sec_nb[i] < 0.0);
                if flips {
                    flagged[k] = true;
                    flagged[nb] = true;
                }
            }
        }
    }
    (0..table.points()).filter(|&k| flagged[k]).collect()
}

fn distance_to(lat: &LatticeSpec, seeds: &[usize], radius: f64) -> Vec<f64> {
    let h = lat.dual_spacing();
    let mut dist = vec![f64::INFINITY; lat.sites()];
    let reach = ((radius / h).floor() as i64).min(lat.side as i64 / 2);
    // stencil of index offsets within the radius
    let mut stencil: Vec<(Vec<i64>, f64)> = Vec::new();
    let width = (2 * reach + 1) as usize;
    let count = width.pow(lat.dim as u32);
    for idx in 0..count {
        let mut rest = idx;
        let mut off = vec![0i64; lat.dim];
        for a in (0..lat.dim).rev() {
            off[a] = (rest % width) as i64 - reach;
            rest /= width;
        }
        let r = off.iter().map(|&o| (o * o) as f64).sum::<f64>().sqrt() * h;
        if r <= radius + 1e-12 {
            stencil.push((off, r));
        }
    }
    for &s in seeds {
        let base: Vec<i64> = lat.multi_index(s).into_iter().map(|c| c as i64).collect();
        for (off, r) in &stencil {
            let p: Vec<i64> = base.iter().zip(off).map(|(b, o)| b + o).collect();
            let k = lat.wrap_index(&p);
            if *r < dist[k] {
                dist[k] = *r;
            }
        }
    }
    dist
}
