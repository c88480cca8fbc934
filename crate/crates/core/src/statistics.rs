//! Monte Carlo estimators: pair correlations, the a-field, the scaled Wigner matrix,
//! Gaussianity probes and the covariance bound check.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::PhaseField;
use crate::fft::TorusFft;
use crate::grid::LatticeSpec;
use crate::lattice::DispersionTable;
use crate::linalg::{CMat, MatField, I};
use crate::mc::sample_rng;

/// Streaming mean and variance (Welford) of a vector of complex values,
/// real and imaginary parts tracked separately.
#[derive(Clone, Debug)]
pub struct ComplexMoments {
    count: usize,
    mean: Vec<Complex64>,
    m2_re: Vec<f64>,
    m2_im: Vec<f64>,
}

impl ComplexMoments {
    pub fn new(len: usize) -> Self {
        Self {
            count: 0,
            mean: vec![Complex64::new(0.0, 0.0); len],
            m2_re: vec![0.0; len],
            m2_im: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, values: &[Complex64]) {
        assert_eq!(values.len(), self.mean.len(), "observation length changed");
        self.count += 1;
        let c = self.count as f64;
        for (i, x) in values.iter().enumerate() {
            let d = x - self.mean[i];
            self.mean[i] += d / c;
            let d2 = x - self.mean[i];
            self.m2_re[i] += d.re * d2.re;
            self.m2_im[i] += d.im * d2.im;
        }
    }

    pub fn mean(&self) -> &[Complex64] {
        &self.mean
    }

    /// Standard errors of the real and imaginary parts of the mean.
    pub fn stderr(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.count as f64;
        let f = |m2: &f64| {
            if self.count < 2 {
                0.0
            } else {
                (m2 / (c - 1.0) / c).sqrt()
            }
        };
        (self.m2_re.iter().map(f).collect(), self.m2_im.iter().map(f).collect())
    }
}

/// Mean of `f(X(x₀ + a)) ⊗ X(x₀)` over a set of base points, per offset `a`.
#[derive(Clone, Debug)]
pub struct PairAccumulator {
    lattice: LatticeSpec,
    width: usize,
    offsets: Vec<Vec<i64>>,
    bases: Vec<usize>,
    conjugate_first: bool,
    shifted: Vec<Vec<usize>>,
    moments: ComplexMoments,
}

impl PairAccumulator {
    /// `width` values per site; `conjugate_first` conjugates the shifted factor.
    pub fn new(
        lattice: LatticeSpec,
        width: usize,
        offsets: Vec<Vec<i64>>,
        bases: Vec<usize>,
        conjugate_first: bool,
    ) -> Result<Self> {
        if offsets.is_empty() || bases.is_empty() {
            return Err(Error::InvalidParameter("need at least one offset and one base point".into()));
        }
        if offsets.iter().any(|o| o.len() != lattice.dim) {
            return Err(Error::InvalidParameter("offset dimension mismatch".into()));
        }
        if bases.iter().any(|&b| b >= lattice.sites()) {
            return Err(Error::InvalidParameter("base point outside the torus".into()));
        }
        let shifted = offsets
            .iter()
            .map(|o| {
                bases
                    .iter()
                    .map(|&b| {
                        let p: Vec<i64> = lattice
                            .multi_index(b)
                            .iter()
                            .zip(o)
                            .map(|(&x, &a)| x as i64 + a)
                            .collect();
                        lattice.wrap_index(&p)
                    })
                    .collect()
            })
            .collect();
        let len = offsets.len() * width * width;
        Ok(Self {
            lattice,
            width,
            offsets,
            bases,
            conjugate_first,
            shifted,
            moments: ComplexMoments::new(len),
        })
    }

    /// Per-sample pair averages for a field laid out `[site][width]`.
    pub fn observe(&self, data: &[Complex64]) -> Vec<Complex64> {
        let m = self.width;
        let nb = self.bases.len() as f64;
        let mut out = vec![Complex64::new(0.0, 0.0); self.offsets.len() * m * m];
        for (o, shifted) in self.shifted.iter().enumerate() {
            let block = &mut out[o * m * m..(o + 1) * m * m];
            for (&b, &s) in self.bases.iter().zip(shifted) {
                for r in 0..m {
                    let left = data[s * m + r];
                    let left = if self.conjugate_first { left.conj() } else { left };
                    for c in 0..m {
                        block[r * m + c] += left * data[b * m + c];
                    }
                }
            }
            for z in block.iter_mut() {
                *z /= nb;
            }
        }
        out
    }

    pub fn push_observation(&mut self, obs: &[Complex64]) {
        self.moments.push(obs);
    }

    pub fn add(&mut self, data: &[Complex64]) {
        let obs = self.observe(data);
        self.moments.push(&obs);
    }

    pub fn count(&self) -> usize {
        self.moments.count()
    }

    pub fn finish(&self) -> Result<PairEstimate> {
        if self.moments.count() < 2 {
            return Err(Error::TooFewSamples {
                required: 2,
                got: self.moments.count(),
            });
        }
        let m = self.width;
        let (se_re, se_im) = self.moments.stderr();
        let mean = self.moments.mean();
        let mut means = Vec::new();
        let mut ser = Vec::new();
        let mut sei = Vec::new();
        for o in 0..self.offsets.len() {
            let at = |r: usize, c: usize| o * m * m + r * m + c;
            means.push(CMat::from_fn(m, m, |r, c| mean[at(r, c)]));
            ser.push(DMatrix::from_fn(m, m, |r, c| se_re[at(r, c)]));
            sei.push(DMatrix::from_fn(m, m, |r, c| se_im[at(r, c)]));
        }
        Ok(PairEstimate {
            offsets: self.offsets.clone(),
            width: m,
            count: self.moments.count(),
            base_points: self.bases.len(),
            mean: means,
            se_re: ser,
            se_im: sei,
        })
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }
}

/// Sample means of pair products per offset with standard errors.
#[derive(Clone, Debug)]
pub struct PairEstimate {
    pub offsets: Vec<Vec<i64>>,
    pub width: usize,
    pub count: usize,
    pub base_points: usize,
    pub mean: Vec<CMat>,
    pub se_re: Vec<DMatrix<f64>>,
    pub se_im: Vec<DMatrix<f64>>,
}

/// Estimate of `Q^{ij}(x₀ + a, x₀)`, all four blocks stored as one `2n×2n` matrix per offset.
pub type CovarianceEstimate = PairEstimate;

impl PairEstimate {
    /// Complex standard error `sqrt(se_re² + se_im²)` of one entry.
    pub fn stderr(&self, offset: usize, r: usize, c: usize) -> f64 {
        self.se_re[offset][(r, c)].hypot(self.se_im[offset][(r, c)])
    }

    /// Block `(i, j)` of the estimate at one offset; only meaningful for phase fields.
    pub fn block(&self, offset: usize, i: usize, j: usize) -> CMat {
        let n = self.width / 2;
        self.mean[offset].view((i * n, j * n), (n, n)).into_owned()
    }

    /// Entrywise z-scores against `theory(offset)`: real and imaginary parts are scored
    /// separately; entries with zero error score 0 on exact agreement, `∞` otherwise.
    pub fn z_scores(&self, theory: impl Fn(&[i64]) -> CMat) -> Vec<f64> {
        let mut out = Vec::new();
        for (o, off) in self.offsets.iter().enumerate() {
            let th = theory(off);
            for r in 0..self.width {
                for c in 0..self.width {
                    let d = self.mean[o][(r, c)] - th[(r, c)];
                    out.push(z_value(d.re, self.se_re[o][(r, c)]));
                    out.push(z_value(d.im, self.se_im[o][(r, c)]));
                }
            }
        }
        out
    }

    pub fn max_z(&self, theory: impl Fn(&[i64]) -> CMat) -> f64 {
        self.z_scores(theory).into_iter().fold(0.0, f64::max)
    }

    /// `Σ_offsets Σ_entries |mean − theory|`.
    pub fn l1_distance(&self, theory: impl Fn(&[i64]) -> CMat) -> f64 {
        self.offsets
            .iter()
            .enumerate()
            .map(|(o, off)| {
                let th = theory(off);
                (0..self.width * self.width)
                    .map(|e| (self.mean[o][(e / self.width, e % self.width)] - th[(e / self.width, e % self.width)]).norm())
                    .sum::<f64>()
            })
            .sum()
    }

    /// Largest Frobenius norm of the mean over offsets, and the matching error bound.
    pub fn max_norm(&self) -> (f64, f64) {
        let mut best = (0.0, 0.0);
        for o in 0..self.offsets.len() {
            let norm = self.mean[o].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if norm >= best.0 {
                let se = (0..self.width * self.width)
                    .map(|e| self.stderr(o, e / self.width, e % self.width).powi(2))
                    .sum::<f64>()
                    .sqrt();
                best = (norm, se);
            }
        }
        best
    }

    pub fn to_table(&self) -> crate::export::EstimateTable {
        let mut table = crate::export::EstimateTable::default();
        for o in 0..self.offsets.len() {
            for r in 0..self.width {
                for c in 0..self.width {
                    let (block, row, col) = crate::export::block_label(self.width, r, c);
                    table.push(o, &block, row, col, self.mean[o][(r, c)], self.stderr(o, r, c));
                }
            }
        }
        table
    }
}

pub fn z_value(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff.abs() / se
    } else if diff.abs() <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Offsets `a` with `|a|_∞ ≤ radius` along the first axis only (others zero).
pub fn axis_offsets(dim: usize, radius: i64) -> Vec<Vec<i64>> {
    (-radius..=radius)
        .map(|a| {
            let mut o = vec![0; dim];
            o[0] = a;
            o
        })
        .collect()
}

fn phase_data(y: &PhaseField) -> Vec<Complex64> {
    let n = y.lattice().components;
    let sites = y.lattice().sites();
    let mut out = Vec::with_capacity(sites * 2 * n);
    for x in 0..sites {
        out.extend(y.u[x * n..(x + 1) * n].iter().map(|&v| Complex64::new(v, 0.0)));
        out.extend(y.v[x * n..(x + 1) * n].iter().map(|&v| Complex64::new(v, 0.0)));
    }
    out
}

/// Accumulates `Y(x₀ + a) ⊗ Y(x₀)`, i.e. `Q^{ij}(x₀ + a, x₀)` in `2n×2n` form.
#[derive(Clone, Debug)]
pub struct CovarianceAccumulator {
    inner: PairAccumulator,
}

impl CovarianceAccumulator {
    /// Single base point.
    pub fn at_point(lattice: LatticeSpec, base: usize, offsets: Vec<Vec<i64>>) -> Result<Self> {
        Self::over_points(lattice, vec![base], offsets)
    }

    /// Per-sample average over several base points (all sites for homogeneous input).
    pub fn over_points(lattice: LatticeSpec, bases: Vec<usize>, offsets: Vec<Vec<i64>>) -> Result<Self> {
        Ok(Self {
            inner: PairAccumulator::new(lattice, 2 * lattice.components, offsets, bases, false)?,
        })
    }

    pub fn observe(&self, y: &PhaseField) -> Vec<Complex64> {
        self.inner.observe(&phase_data(y))
    }

    pub fn push_observation(&mut self, obs: &[Complex64]) {
        self.inner.push_observation(obs);
    }

    pub fn add(&mut self, y: &PhaseField) {
        let obs = self.observe(y);
        self.inner.push_observation(&obs);
    }

    pub fn finish(&self) -> Result<CovarianceEstimate> {
        self.inner.finish()
    }
}

/// Unbiased covariance estimate at base point `x₀` from a list of samples.
pub fn estimate_covariance(samples: &[PhaseField], base: usize, offsets: Vec<Vec<i64>>) -> Result<CovarianceEstimate> {
    let first = samples.first().ok_or(Error::TooFewSamples { required: 2, got: 0 })?;
    let mut acc = CovarianceAccumulator::at_point(*first.lattice(), base, offsets)?;
    for s in samples {
        first.lattice().ensure_same(s.lattice())?;
        acc.add(s);
    }
    acc.finish()
}

/// `Y ↦ a = (Ω^{1/2}u + iΩ^{-1/2}v)/√2` on the Fourier side.
#[derive(Clone, Debug)]
pub struct AFieldMap {
    lattice: LatticeSpec,
    fft: TorusFft,
    sqrt: MatField,
    inv_sqrt: MatField,
    masked: Vec<usize>,
}

impl AFieldMap {
    /// Fails on singular grid points unless `allow_mask`, in which case they map to 0.
    pub fn new(table: &DispersionTable, allow_mask: bool) -> Result<Self> {
        let lattice = *table.lattice();
        let n = lattice.components;
        let masked = table.singular_points();
        if !masked.is_empty() && !allow_mask {
            let k = masked[0];
            return Err(Error::SingularMode {
                index: k,
                theta: lattice.theta(k),
                omega: table.min_freq(k),
            });
        }
        let tol = table.singular_tol();
        let mut sqrt = MatField::zeros(lattice.sites(), n, n);
        let mut inv_sqrt = MatField::zeros(lattice.sites(), n, n);
        for k in 0..lattice.sites() {
            if table.is_singular(k) {
                continue;
            }
            sqrt.set(k, &table.apply_fn(k, |w| w.sqrt()));
            inv_sqrt.set(k, &table.apply_fn(k, |w| if w < tol { 0.0 } else { 1.0 / w.sqrt() }));
        }
        Ok(Self {
            lattice,
            fft: TorusFft::for_lattice(&lattice),
            sqrt,
            inv_sqrt,
            masked,
        })
    }

    pub fn masked_points(&self) -> &[usize] {
        &self.masked
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn fft(&self) -> &TorusFft {
        &self.fft
    }

    /// `â` from `(û, v̂)`, all laid out `[point][component]`.
    pub fn apply_fourier(&self, uhat: &[Complex64], vhat: &[Complex64]) -> Vec<Complex64> {
        let n = self.lattice.components;
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mut out = vec![Complex64::new(0.0, 0.0); uhat.len()];
        for k in 0..self.lattice.sites() {
            let p = self.sqrt.slice(k);
            let q = self.inv_sqrt.slice(k);
            for r in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for c in 0..n {
                    acc += p[c * n + r] * uhat[k * n + c] + I * q[c * n + r] * vhat[k * n + c];
                }
                out[k * n + r] = acc * s;
            }
        }
        out
    }

    /// Position-space `a(x)`, laid out `[site][component]`.
    pub fn apply(&self, y: &PhaseField) -> Result<Vec<Complex64>> {
        self.lattice.ensure_same(y.lattice())?;
        let (uhat, vhat) = y.to_fourier(&self.fft);
        let mut ahat = self.apply_fourier(&uhat, &vhat);
        self.from_fourier_in_place(&mut ahat);
        Ok(ahat)
    }

    /// Inverse transform of `â` to `a(x)`, keeping the complex values.
    pub fn from_fourier_in_place(&self, ahat: &mut [Complex64]) {
        let n = self.lattice.components;
        let points = self.lattice.sites();
        if n == 1 {
            self.fft.from_fourier(ahat);
            return;
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); points];
        for j in 0..n {
            for k in 0..points {
                buf[k] = ahat[k * n + j];
            }
            self.fft.from_fourier(&mut buf);
            for k in 0..points {
                ahat[k * n + j] = buf[k];
            }
        }
    }

    /// Recovers `(u, v)` from `a` via `û = Ω^{-1/2}(â + b̂)/√2`, `v̂ = Ω^{1/2}(â − b̂)/(i√2)`
    /// with `b̂(θ) = conj â(−θ)`. Masked points come back as zero.
    pub fn invert(&self, a: &[Complex64]) -> PhaseField {
        let n = self.lattice.components;
        let points = self.lattice.sites();
        let mut ahat = vec![Complex64::new(0.0, 0.0); points * n];
        for j in 0..n {
            let mut buf: Vec<Complex64> = (0..points).map(|k| a[k * n + j]).collect();
            self.fft.to_fourier(&mut buf);
            for k in 0..points {
                ahat[k * n + j] = buf[k];
            }
        }
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mut uhat = vec![Complex64::new(0.0, 0.0); points * n];
        let mut vhat = vec![Complex64::new(0.0, 0.0); points * n];
        for k in 0..points {
            let mk = self.lattice.negate(k);
            let p = self.sqrt.slice(k);
            let q = self.inv_sqrt.slice(k);
            for r in 0..n {
                let mut su = Complex64::new(0.0, 0.0);
                let mut sv = Complex64::new(0.0, 0.0);
                for c in 0..n {
                    let plus = ahat[k * n + c] + ahat[mk * n + c].conj();
                    let minus = ahat[k * n + c] - ahat[mk * n + c].conj();
                    su += q[c * n + r] * plus;
                    sv += p[c * n + r] * minus;
                }
                uhat[k * n + r] = su * s;
                vhat[k * n + r] = -I * sv * s;
            }
        }
        PhaseField::from_fourier(
            self.lattice,
            &self.fft,
            uhat,
            vhat,
        )
    }
}

/// `a(x)` for one field; errors at singular grid points.
pub fn a_field(y: &PhaseField, table: &DispersionTable) -> Result<Vec<Complex64>> {
    AFieldMap::new(table, false)?.apply(y)
}

/// Accumulates `a(x₀ + a) ⊗ a(x₀)` without conjugation.
pub fn aa_accumulator(lattice: LatticeSpec, bases: Vec<usize>, offsets: Vec<Vec<i64>>) -> Result<PairAccumulator> {
    PairAccumulator::new(lattice, lattice.components, offsets, bases, false)
}

/// Sample mean of `a(x₀ + a) ⊗ a(x₀)` over the given samples.
pub fn aa_covariance(
    samples: &[PhaseField],
    table: &DispersionTable,
    bases: Vec<usize>,
    offsets: Vec<Vec<i64>>,
) -> Result<PairEstimate> {
    let map = AFieldMap::new(table, true)?;
    let mut acc = aa_accumulator(*table.lattice(), bases, offsets)?;
    for s in samples {
        acc.add(&map.apply(s)?);
    }
    acc.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Taper {
    Boxcar,
    Triangular,
}

impl Taper {
    pub fn weight(&self, y: &[i64], ymax: usize) -> f64 {
        match self {
            Taper::Boxcar => 1.0,
            Taper::Triangular => y
                .iter()
                .map(|&c| 1.0 - c.unsigned_abs() as f64 / (ymax as f64 + 1.0))
                .product(),
        }
    }
}

/// Where and how the Wigner sum is evaluated.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WignerWindow {
    pub tau: f64,
    pub epsilon: f64,
    pub r: Vec<f64>,
    pub ymax: usize,
    pub taper: Taper,
}

/// Streaming estimator of
/// `W^ε(θ) = Σ_{|y|_∞ ≤ Y} e^{iθ·y} taper(y) E[a*(⌊x₀ + y/2⌋) ⊗ a(⌊x₀ − y/2⌋)]`, `x₀ = ⌊r/ε⌋`.
#[derive(Clone, Debug)]
pub struct WignerAccumulator {
    lattice: LatticeSpec,
    window: WignerWindow,
    fft: TorusFft,
    /// `(wrapped y index, site of the left factor, site of the right factor, taper)`.
    terms: Vec<(usize, usize, usize, f64)>,
    moments: ComplexMoments,
}

impl WignerAccumulator {
    pub fn new(lattice: LatticeSpec, window: WignerWindow) -> Result<Self> {
        let d = lattice.dim;
        if window.r.len() != d {
            return Err(Error::InvalidParameter(format!("r must have {d} coordinates")));
        }
        if !(window.epsilon > 0.0 && window.epsilon < 1.0) {
            return Err(Error::InvalidParameter("epsilon must lie in (0,1)".into()));
        }
        if 2 * window.ymax >= lattice.side {
            return Err(Error::TorusTooSmall {
                reason: format!("Wigner window {} does not fit", window.ymax),
                required: 2 * window.ymax + 2,
            });
        }
        let x0: Vec<i64> = window.r.iter().map(|r| (r / window.epsilon).floor() as i64).collect();
        let width = 2 * window.ymax + 1;
        let mut terms = Vec::with_capacity(width.pow(d as u32));
        for idx in 0..width.pow(d as u32) {
            let mut rest = idx;
            let mut y = vec![0i64; d];
            for a in (0..d).rev() {
                y[a] = (rest % width) as i64 - window.ymax as i64;
                rest /= width;
            }
            // ⌊x₀ + y/2⌋ and ⌊x₀ − y/2⌋ for integer x₀
            let left: Vec<i64> = x0.iter().zip(&y).map(|(x, y)| x + y.div_euclid(2)).collect();
            let right: Vec<i64> = x0.iter().zip(&y).map(|(x, y)| x + (-y).div_euclid(2)).collect();
            terms.push((
                lattice.wrap_index(&y),
                lattice.wrap_index(&left),
                lattice.wrap_index(&right),
                window.taper.weight(&y, window.ymax),
            ));
        }
        let n = lattice.components;
        Ok(Self {
            fft: TorusFft::for_lattice(&lattice),
            moments: ComplexMoments::new(lattice.sites() * n * n),
            lattice,
            window,
            terms,
        })
    }

    /// Per-sample `Ŵ(θ_k)` for an a-field laid out `[site][component]`,
    /// returned as `[point][row][col]`.
    pub fn observe(&self, a: &[Complex64]) -> Vec<Complex64> {
        let n = self.lattice.components;
        let points = self.lattice.sites();
        let mut out = vec![Complex64::new(0.0, 0.0); points * n * n];
        let mut buf = vec![Complex64::new(0.0, 0.0); points];
        for r in 0..n {
            for c in 0..n {
                buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
                for &(yi, p, q, w) in &self.terms {
                    buf[yi] += a[p * n + r].conj() * a[q * n + c] * w;
                }
                self.fft.to_fourier(&mut buf);
                for k in 0..points {
                    out[k * n * n + r * n + c] = buf[k];
                }
            }
        }
        out
    }

    pub fn push_observation(&mut self, obs: &[Complex64]) {
        self.moments.push(obs);
    }

    pub fn add(&mut self, a: &[Complex64]) {
        let obs = self.observe(a);
        self.moments.push(&obs);
    }

    pub fn finish(&self) -> Result<WignerEstimate> {
        if self.moments.count() < 2 {
            return Err(Error::TooFewSamples {
                required: 2,
                got: self.moments.count(),
            });
        }
        let n = self.lattice.components;
        let (se_re, se_im) = self.moments.stderr();
        let points = self.lattice.sites();
        let mean = MatField::from_fn(points, n, n, |k| {
            CMat::from_fn(n, n, |r, c| self.moments.mean()[k * n * n + r * n + c])
        });
        Ok(WignerEstimate {
            lattice: self.lattice,
            window: self.window.clone(),
            count: self.moments.count(),
            mean,
            se_re,
            se_im,
        })
    }
}

/// Monte Carlo Wigner matrix per grid point with standard errors.
#[derive(Clone, Debug)]
pub struct WignerEstimate {
    pub lattice: LatticeSpec,
    pub window: WignerWindow,
    pub count: usize,
    pub mean: MatField,
    se_re: Vec<f64>,
    se_im: Vec<f64>,
}

impl WignerEstimate {
    /// Complex standard error of entry `(r, c)` at grid point `k`.
    pub fn stderr(&self, k: usize, r: usize, c: usize) -> f64 {
        let n = self.lattice.components;
        let i = k * n * n + r * n + c;
        self.se_re[i].hypot(self.se_im[i])
    }

    /// Frobenius norm of the entrywise standard errors at `k`.
    pub fn stderr_norm(&self, k: usize) -> f64 {
        let n = self.lattice.components;
        (0..n * n)
            .map(|e| self.stderr(k, e / n, e % n).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Grid mean of `‖Ŵ − W_theory‖_F` over points with `mask[k] == false`, and the
    /// grid mean of the per-point standard error norm over the same points.
    pub fn l1_distance(&self, theory: &MatField, mask: &[bool]) -> (f64, f64) {
        let mut dist = 0.0;
        let mut se = 0.0;
        let mut count = 0usize;
        for k in 0..self.lattice.sites() {
            if mask[k] {
                continue;
            }
            let diff = self.mean.get(k) - theory.get(k);
            dist += diff.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            se += self.stderr_norm(k);
            count += 1;
        }
        let c = count.max(1) as f64;
        (dist / c, se / c)
    }

    pub fn to_table(&self) -> crate::export::EstimateTable {
        let n = self.lattice.components;
        let mut table = crate::export::EstimateTable::default();
        for k in 0..self.lattice.sites() {
            let m = self.mean.get(k);
            for r in 0..n {
                for c in 0..n {
                    table.push(k, "w", r, c, m[(r, c)], self.stderr(k, r, c));
                }
            }
        }
        table
    }
}

/// One-shot Wigner estimate from fields already evolved to `τ/ε`.
pub fn wigner_estimate(
    samples: &[PhaseField],
    table: &DispersionTable,
    window: WignerWindow,
) -> Result<WignerEstimate> {
    let map = AFieldMap::new(table, true)?;
    let mut acc = WignerAccumulator::new(*table.lattice(), window)?;
    for s in samples {
        acc.add(&map.apply(s)?);
    }
    acc.finish()
}

/// Finitely supported linear functional `ξ = ⟨Y, Ψ⟩ = Σ w·Y^i_j(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    /// `(site, block i ∈ {0,1}, component j, weight)`.
    pub terms: Vec<(usize, usize, usize, f64)>,
}

impl Probe {
    pub fn single(site: usize, block: usize, component: usize) -> Self {
        Self {
            terms: vec![(site, block, component, 1.0)],
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            terms: self.terms.iter().map(|&(x, i, j, w)| (x, i, j, w * s)).collect(),
        }
    }

    pub fn evaluate(&self, y: &PhaseField) -> f64 {
        let n = y.lattice().components;
        self.terms
            .iter()
            .map(|&(x, i, j, w)| w * if i == 0 { y.u[x * n + j] } else { y.v[x * n + j] })
            .sum()
    }

    /// `Q(Ψ, Ψ) = Σ Ψ(x)ᵀ q(x − x') Ψ(x')` for a translation-invariant correlation.
    pub fn quadratic_form(&self, lattice: &LatticeSpec, correlation: impl Fn(&[i64]) -> CMat) -> f64 {
        let n = lattice.components;
        let mut total = 0.0;
        let mut cache: std::collections::HashMap<Vec<i64>, CMat> = Default::default();
        for &(x, i, j, w) in &self.terms {
            for &(x2, i2, j2, w2) in &self.terms {
                let a = lattice.multi_index(x);
                let b = lattice.multi_index(x2);
                let off: Vec<i64> = a
                    .iter()
                    .zip(&b)
                    .map(|(&p, &q)| {
                        let d = p as i64 - q as i64;
                        let s = lattice.side as i64;
                        (d + s / 2).rem_euclid(s) - s / 2
                    })
                    .collect();
                let q = cache.entry(off.clone()).or_insert_with(|| correlation(&off));
                total += w * w2 * q[(i * n + j, i2 * n + j2)].re;
            }
        }
        total
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KurtosisResult {
    /// `E[ξ⁴] / (3E[ξ²]²) − 1`, moments about zero.
    pub value: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub count: usize,
}

impl KurtosisResult {
    pub fn z(&self) -> f64 {
        z_value(self.value, self.stderr)
    }
}

pub const MIN_KURTOSIS_SAMPLES: usize = 1000;

fn normalized_kurtosis(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut m2, mut m4, mut c) = (0.0, 0.0, 0.0);
    for x in values {
        let x2 = x * x;
        m2 += x2;
        m4 += x2 * x2;
        c += 1.0;
    }
    (m4 / c / (3.0 * (m2 / c).powi(2)) - 1.0, m2 / c)
}

/// Normalised excess kurtosis of probe values with a bootstrap interval.
pub fn fourth_cumulant_test(values: &[f64], bootstrap: usize, seed: u64) -> Result<KurtosisResult> {
    if values.len() < MIN_KURTOSIS_SAMPLES {
        return Err(Error::TooFewSamples {
            required: MIN_KURTOSIS_SAMPLES,
            got: values.len(),
        });
    }
    let (value, var) = normalized_kurtosis(values.iter().copied());
    if !(var > 0.0) {
        return Err(Error::DegenerateProbe);
    }
    let mut rng = sample_rng(seed, u64::MAX);
    let n = values.len();
    let mut reps: Vec<f64> = (0..bootstrap.max(2))
        .map(|_| normalized_kurtosis((0..n).map(|_| values[rng.random_range(0..n)])).0)
        .collect();
    reps.sort_by(f64::total_cmp);
    let mean = reps.iter().sum::<f64>() / reps.len() as f64;
    let stderr = (reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64).sqrt();
    let q = |p: f64| reps[((p * (reps.len() - 1) as f64).round() as usize).min(reps.len() - 1)];
    Ok(KurtosisResult {
        value,
        stderr,
        ci_low: q(0.025),
        ci_high: q(0.975),
        count: n,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CharacteristicResult {
    pub empirical: Complex64,
    pub theory: f64,
    pub difference: f64,
    pub stderr_re: f64,
    pub stderr_im: f64,
}

impl CharacteristicResult {
    /// Larger of the real- and imaginary-part z-scores.
    pub fn z(&self) -> f64 {
        z_value(self.empirical.re - self.theory, self.stderr_re).max(z_value(self.empirical.im, self.stderr_im))
    }
}

/// `Ê e^{iξ}` against the Gaussian value `e^{−Q/2}`.
pub fn characteristic_functional(values: &[f64], theory_q: f64) -> Result<CharacteristicResult> {
    let mut m = ComplexMoments::new(1);
    for &x in values {
        m.push(&[Complex64::from_polar(1.0, x)]);
    }
    if m.count() < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            got: m.count(),
        });
    }
    let (se_re, se_im) = m.stderr();
    let empirical = m.mean()[0];
    let theory = (-0.5 * theory_q).exp();
    Ok(CharacteristicResult {
        empirical,
        theory,
        difference: (empirical - theory).norm(),
        stderr_re: se_re[0],
        stderr_im: se_im[0],
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundRow {
    pub epsilon: f64,
    pub t: f64,
    pub max_norm: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
    pub max_norm: f64,
    /// Least-squares slope of the max norm against `t`, pooled over `ε`.
    pub slope: f64,
    pub slope_stderr: f64,
    pub no_growth: bool,
}

/// Max covariance norms over an `(ε, t)` grid and a test for growth in `t`.
pub fn uniform_bound_check(estimates: &[(f64, f64, &PairEstimate)]) -> Result<BoundReport> {
    if estimates.is_empty() {
        return Err(Error::InvalidParameter("no estimates supplied".into()));
    }
    let rows: Vec<BoundRow> = estimates
        .iter()
        .map(|(eps, t, est)| {
            let (max_norm, stderr) = est.max_norm();
            BoundRow {
                epsilon: *eps,
                t: *t,
                max_norm,
                stderr,
            }
        })
        .collect();
    let max_norm = rows.iter().map(|r| r.max_norm).fold(0.0, f64::max);
    let ts: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let mt = ts.iter().sum::<f64>() / ts.len() as f64;
    let sxx: f64 = ts.iter().map(|t| (t - mt).powi(2)).sum();
    let (slope, slope_stderr) = if sxx > 0.0 {
        let ys: Vec<f64> = rows.iter().map(|r| r.max_norm).collect();
        let slope = crate::evolution::linear_fit(&ts, &ys).0;
        let var: f64 = rows.iter().map(|r| (r.t - mt).powi(2) * r.stderr.powi(2)).sum();
        (slope, var.sqrt() / sxx)
    } else {
        (0.0, 0.0)
    };
    Ok(BoundReport {
        no_growth: slope <= 3.0 * slope_stderr,
        rows,
        max_norm,
        slope,
        slope_stderr,
    })
}

/// All sites of the torus, for translation-averaged estimators.
pub fn all_sites(lattice: &LatticeSpec) -> Vec<usize> {
    (0..lattice.sites()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::ForceField;
    use crate::random_fields::{HomogeneousSampler, HomogeneousSpectrum, NoiseKind};

    fn massive(side: usize) -> DispersionTable {
        let lat = LatticeSpec::new(1, 1, side).unwrap();
        DispersionTable::build(&ForceField::nearest_neighbor(lat, &[1.0], &[1.0]).unwrap(), None).unwrap()
    }

    #[test]
    fn zero_fields_give_zero_estimates() {
        let lat = LatticeSpec::new(1, 1, 16).unwrap();
        let samples = vec![PhaseField::zeros(lat); 3];
        let est = estimate_covariance(&samples, 0, axis_offsets(1, 2)).unwrap();
        assert!(est.mean.iter().all(|m| m.iter().all(|z| z.norm() == 0.0)));
        assert_eq!(est.stderr(0, 0, 0), 0.0);
        assert!(estimate_covariance(&samples[..1], 0, axis_offsets(1, 2)).is_err());
    }

    #[test]
    fn a_field_scalar_mode() {
        let t = massive(16);
        let lat = *t.lattice();
        let map = AFieldMap::new(&t, false).unwrap();
        let mut y = PhaseField::zeros(lat);
        assert!(map.apply(&y).unwrap().iter().all(|z| z.norm() == 0.0));
        y.u[3] = 0.7;
        y.v[5] = -1.1;
        let a = map.apply(&y).unwrap();
        let back = map.invert(&a);
        for (p, q) in back.u.iter().zip(&y.u).chain(back.v.iter().zip(&y.v)) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn a_field_refuses_massless_points() {
        let lat = LatticeSpec::new(1, 1, 16).unwrap();
        let t = DispersionTable::build(&ForceField::nearest_neighbor(lat, &[1.0], &[0.0]).unwrap(), None).unwrap();
        assert!(matches!(a_field(&PhaseField::zeros(lat), &t), Err(Error::SingularMode { index: 0, .. })));
        assert_eq!(AFieldMap::new(&t, true).unwrap().masked_points(), &[0]);
    }

    #[test]
    fn kurtosis_needs_samples_and_variance() {
        assert!(matches!(fourth_cumulant_test(&[1.0; 10], 10, 0), Err(Error::TooFewSamples { .. })));
        assert!(matches!(fourth_cumulant_test(&[0.0; 2000], 10, 0), Err(Error::DegenerateProbe)));
    }

    #[test]
    fn characteristic_of_zero_probe() {
        let r = characteristic_functional(&[0.0; 50], 0.0).unwrap();
        assert_eq!(r.difference, 0.0);
        assert_eq!(r.z(), 0.0);
    }

    #[test]
    fn wigner_of_zero_is_zero() {
        let t = massive(32);
        let lat = *t.lattice();
        let w = wigner_estimate(
            &[PhaseField::zeros(lat), PhaseField::zeros(lat)],
            &t,
            WignerWindow {
                tau: 0.0,
                epsilon: 0.25,
                r: vec![2.0],
                ymax: 4,
                taper: Taper::Triangular,
            },
        )
        .unwrap();
        assert!(w.mean.as_slice().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn quadratic_form_of_single_site() {
        let t = massive(32);
        let spec = HomogeneousSpectrum::gibbs(&t, 2.0).unwrap();
        let p = Probe::single(4, 1, 0);
        let q = p.quadratic_form(t.lattice(), |o| spec.correlation(o));
        assert!((q - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bound_check_on_zero_input() {
        let lat = LatticeSpec::new(1, 1, 16).unwrap();
        let est = estimate_covariance(&vec![PhaseField::zeros(lat); 4], 0, axis_offsets(1, 1)).unwrap();
        let rep = uniform_bound_check(&[(0.1, 0.0, &est), (0.1, 10.0, &est)]).unwrap();
        assert_eq!(rep.max_norm, 0.0);
        assert!(rep.no_growth);
    }

    #[test]
    fn sampler_lag_zero_velocity_variance() {
        let t = massive(64);
        let spec = HomogeneousSpectrum::gibbs(&t, 1.0).unwrap();
        let s = HomogeneousSampler::new(&spec).unwrap();
        let mut acc = CovarianceAccumulator::at_point(*t.lattice(), 7, axis_offsets(1, 0)).unwrap();
        for i in 0..4000 {
            acc.add(&s.sample_indexed(11, i, NoiseKind::Gaussian));
        }
        let est = acc.finish().unwrap();
        let z = z_value(est.mean[0][(1, 1)].re - 1.0, est.se_re[0][(1, 1)]);
        assert!(z < 4.0, "z = {z}");
    }
}
