//! Exact spectral time evolution, energy, Green functions and their decay.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::fft::TorusFft;
use crate::grid::LatticeSpec;
use crate::lattice::{CriticalSet, DispersionTable, ForceField};
use crate::linalg::{matvec, CMat, MatField};

/// One realization `Y = (u, v)` on the torus, laid out `[site][component]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseField {
    lattice: LatticeSpec,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

const BINARY_MAGIC: &[u8; 8] = b"PHFIELD1";

impl PhaseField {
    pub fn zeros(lattice: LatticeSpec) -> Self {
        let len = lattice.sites() * lattice.components;
        Self {
            lattice,
            u: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn new(lattice: LatticeSpec, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let len = lattice.sites() * lattice.components;
        if u.len() != len || v.len() != len {
            return Err(Error::InvalidParameter(format!(
                "phase field arrays must have length {len}, got {} and {}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("phase field has non-finite entries".into()));
        }
        Ok(Self { lattice, u, v })
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    /// `α·self + β·other`.
    pub fn combine(&self, alpha: f64, other: &PhaseField, beta: f64) -> Result<PhaseField> {
        self.lattice.ensure_same(&other.lattice)?;
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| alpha * x + beta * y).collect();
        Ok(PhaseField {
            lattice: self.lattice,
            u: mix(&self.u, &other.u),
            v: mix(&self.v, &other.v),
        })
    }

    /// Fourier coefficients `(û, v̂)`, laid out `[point][component]`.
    pub fn to_fourier(&self, fft: &TorusFft) -> (Vec<Complex64>, Vec<Complex64>) {
        let n = self.lattice.components;
        (
            components_to_fourier(fft, &self.u, n),
            components_to_fourier(fft, &self.v, n),
        )
    }

    /// Inverse of [`PhaseField::to_fourier`]; imaginary residue is discarded.
    pub fn from_fourier(
        lattice: LatticeSpec,
        fft: &TorusFft,
        uhat: Vec<Complex64>,
        vhat: Vec<Complex64>,
    ) -> PhaseField {
        let n = lattice.components;
        PhaseField {
            lattice,
            u: components_from_fourier(fft, uhat, n),
            v: components_from_fourier(fft, vhat, n),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "component", "u", "v"])?;
        let n = self.lattice.components;
        for (idx, (u, v)) in self.u.iter().zip(&self.v).enumerate() {
            w.write_record([
                (idx / n).to_string(),
                (idx % n).to_string(),
                format!("{u:e}"),
                format!("{v:e}"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(lattice: LatticeSpec, input: R) -> Result<PhaseField> {
        let mut field = PhaseField::zeros(lattice);
        let n = lattice.components;
        let mut seen = vec![false; field.u.len()];
        let mut r = csv::Reader::from_reader(input);
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<&str> {
                rec.get(i)
                    .ok_or_else(|| Error::Schema(format!("missing column {i} in phase-field CSV")))
            };
            let x: usize = parse(0)?.parse().map_err(|_| Error::Schema("bad site index".into()))?;
            let c: usize = parse(1)?.parse().map_err(|_| Error::Schema("bad component".into()))?;
            let u: f64 = parse(2)?.parse().map_err(|_| Error::Schema("bad u value".into()))?;
            let v: f64 = parse(3)?.parse().map_err(|_| Error::Schema("bad v value".into()))?;
            if x >= lattice.sites() || c >= n {
                return Err(Error::Schema(format!("entry ({x}, {c}) outside lattice")));
            }
            field.u[x * n + c] = u;
            field.v[x * n + c] = v;
            seen[x * n + c] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Schema("phase-field CSV does not cover every site".into()));
        }
        Ok(field)
    }

    /// Little-endian binary snapshot: magic, `d, n, N` as u64, then `u` and `v` as f64.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(BINARY_MAGIC)?;
        for x in [self.lattice.dim, self.lattice.components, self.lattice.side] {
            out.write_all(&(x as u64).to_le_bytes())?;
        }
        for x in self.u.iter().chain(&self.v) {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<PhaseField> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Schema("not a phase-field snapshot".into()));
        }
        let mut word = [0u8; 8];
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            input.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word) as usize;
        }
        let lattice = LatticeSpec::new(header[0], header[1], header[2])?;
        let len = lattice.sites() * lattice.components;
        let mut read = |count: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                input.read_exact(&mut word)?;
                out.push(f64::from_le_bytes(word));
            }
            Ok(out)
        };
        let u = read(len)?;
        let v = read(len)?;
        PhaseField::new(lattice, u, v)
    }
}

pub fn components_to_fourier(fft: &TorusFft, data: &[f64], n: usize) -> Vec<Complex64> {
    let points = fft.len();
    let mut out = vec![Complex64::new(0.0, 0.0); points * n];
    let mut buf = vec![Complex64::new(0.0, 0.0); points];
    for j in 0..n {
        for k in 0..points {
            buf[k] = Complex64::new(data[k * n + j], 0.0);
        }
        fft.to_fourier(&mut buf);
        for k in 0..points {
            out[k * n + j] = buf[k];
        }
    }
    out
}

pub fn components_from_fourier(fft: &TorusFft, mut data: Vec<Complex64>, n: usize) -> Vec<f64> {
    let points = fft.len();
    if n == 1 {
        fft.from_fourier(&mut data);
        return data.into_iter().map(|c| c.re).collect();
    }
    let mut out = vec![0.0; points * n];
    let mut buf = vec![Complex64::new(0.0, 0.0); points];
    for j in 0..n {
        for k in 0..points {
            buf[k] = data[k * n + j];
        }
        fft.from_fourier(&mut buf);
        for k in 0..points {
            out[k * n + j] = buf[k].re;
        }
    }
    out
}

/// `sin(ωt)/ω`, continuous at `ω = 0`.
pub fn sinc_time(omega: f64, t: f64) -> f64 {
    let x = omega * t;
    if x.abs() < 1e-6 {
        t * (1.0 - x * x / 6.0)
    } else {
        x.sin() / omega
    }
}

/// `Ĝ_t(θ_k)` on the dual grid.
#[derive(Clone, Debug)]
pub struct PropagatorTable {
    lattice: LatticeSpec,
    t: f64,
    blocks: MatField,
}

impl PropagatorTable {
    pub fn build(table: &DispersionTable, t: f64) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::InvalidParameter(format!("time must be finite, got {t}")));
        }
        let n = table.components();
        let mats: Vec<CMat> = (0..table.points())
            .into_par_iter()
            .map(|k| propagator_at(table, k, t))
            .collect();
        let mut blocks = MatField::zeros(table.points(), 2 * n, 2 * n);
        for (k, m) in mats.iter().enumerate() {
            blocks.set(k, m);
        }
        Ok(Self {
            lattice: *table.lattice(),
            t,
            blocks,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn matrix(&self, k: usize) -> CMat {
        self.blocks.get(k)
    }

    /// Applies `Ĝ_t` in place to Fourier data laid out `[point][component]`.
    pub fn apply_fourier(&self, uhat: &mut [Complex64], vhat: &mut [Complex64]) {
        let n = self.lattice.components;
        let mut x = vec![Complex64::new(0.0, 0.0); 2 * n];
        let mut y = vec![Complex64::new(0.0, 0.0); 2 * n];
        for k in 0..self.blocks.points() {
            x[..n].copy_from_slice(&uhat[k * n..(k + 1) * n]);
            x[n..].copy_from_slice(&vhat[k * n..(k + 1) * n]);
            matvec(self.blocks.slice(k), &x, &mut y);
            uhat[k * n..(k + 1) * n].copy_from_slice(&y[..n]);
            vhat[k * n..(k + 1) * n].copy_from_slice(&y[n..]);
        }
    }
}

/// `[[cos Ωt, sin Ωt Ω⁻¹], [−Ω sin Ωt, cos Ωt]]` at one grid point.
pub fn propagator_at(table: &DispersionTable, k: usize, t: f64) -> CMat {
    let n = table.components();
    let c = table.apply_fn(k, |w| (w * t).cos());
    let s = table.apply_fn(k, |w| sinc_time(w, t));
    let ms = table.apply_fn(k, |w| -w * (w * t).sin());
    let mut g = CMat::zeros(2 * n, 2 * n);
    g.view_mut((0, 0), (n, n)).copy_from(&c);
    g.view_mut((0, n), (n, n)).copy_from(&s);
    g.view_mut((n, 0), (n, n)).copy_from(&ms);
    g.view_mut((n, n), (n, n)).copy_from(&c);
    g
}

/// Exact evolution `Ŷ(t) = Ĝ_t Ŷ₀`.
pub fn evolve(y0: &PhaseField, prop: &PropagatorTable) -> Result<PhaseField> {
    prop.lattice.ensure_same(&y0.lattice)?;
    let fft = TorusFft::for_lattice(&y0.lattice);
    Ok(evolve_with(y0, prop, &fft))
}

/// [`evolve`] with a caller-held FFT plan.
pub fn evolve_with(y0: &PhaseField, prop: &PropagatorTable, fft: &TorusFft) -> PhaseField {
    let (mut uhat, mut vhat) = y0.to_fourier(fft);
    prop.apply_fourier(&mut uhat, &mut vhat);
    PhaseField::from_fourier(y0.lattice, fft, uhat, vhat)
}

/// `H = ½⟨v, v⟩ + ½⟨V u, u⟩` on the torus.
pub fn energy(y: &PhaseField, field: &ForceField) -> Result<f64> {
    field.lattice().ensure_same(&y.lattice)?;
    let kinetic: f64 = y.v.iter().map(|v| v * v).sum();
    let vu = field.apply(&y.u);
    let potential: f64 = vu.iter().zip(&y.u).map(|(a, b)| a * b).sum();
    Ok(0.5 * (kinetic + potential))
}

/// C^∞ transition from 0 at `s ≤ 0` to 1 at `s ≥ 1`.
pub fn smooth_transition(s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    if s >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / s).exp();
    let b = (-1.0 / (1.0 - s)).exp();
    a / (a + b)
}

/// Partition `f + g = 1` with `f = 1` within `δ/2` of the critical set and `f = 0`
/// beyond `δ`. Returns the `g` weights per grid point.
pub fn partition_weights(critical: &CriticalSet, delta: f64) -> Vec<f64> {
    let half = 0.5 * delta;
    critical
        .distance
        .iter()
        .map(|&d| smooth_transition((d - half) / half))
        .collect()
}

/// `G_t(x)` as a real `2n×2n` matrix (column-major) per torus site, optionally split.
#[derive(Clone, Debug)]
pub struct GreenFunction {
    lattice: LatticeSpec,
    t: f64,
    full: Vec<f64>,
    split: Option<GreenSplit>,
}

#[derive(Clone, Debug)]
struct GreenSplit {
    delta: f64,
    f_part: Vec<f64>,
    g_part: Vec<f64>,
}

impl GreenFunction {
    /// Inverse transform of `Ĝ_t`; with `split_delta`, also of `f·Ĝ_t` and `g·Ĝ_t`.
    pub fn compute(table: &DispersionTable, t: f64, split_delta: Option<f64>) -> Result<Self> {
        let weights = match split_delta {
            None => None,
            Some(delta) => {
                if !(delta > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "split width must be positive, got {delta}"
                    )));
                }
                let crit = CriticalSet::detect(
                    table,
                    crate::lattice::ConditionTolerances::default().hessian_tol,
                    delta,
                );
                Some((delta, partition_weights(&crit, delta)))
            }
        };
        Self::compute_with_weights(table, t, weights)
    }

    /// As [`GreenFunction::compute`] with precomputed `g` weights.
    pub fn compute_with_weights(
        table: &DispersionTable,
        t: f64,
        weights: Option<(f64, Vec<f64>)>,
    ) -> Result<Self> {
        let lat = *table.lattice();
        let points = lat.sites();
        let m = 2 * lat.components;
        let prop = PropagatorTable::build(table, t)?;
        let fft = TorusFft::for_lattice(&lat);
        let transform = |weight: Option<&[f64]>| -> Vec<f64> {
            let mut out = vec![0.0; points * m * m];
            let channels: Vec<Vec<f64>> = (0..m * m)
                .into_par_iter()
                .map(|e| {
                    let mut buf: Vec<Complex64> = (0..points)
                        .map(|k| {
                            let w = weight.map_or(1.0, |w| w[k]);
                            prop.blocks.slice(k)[e] * w
                        })
                        .collect();
                    fft.from_fourier(&mut buf);
                    buf.into_iter().map(|c| c.re).collect()
                })
                .collect();
            for (e, ch) in channels.into_iter().enumerate() {
                for (x, val) in ch.into_iter().enumerate() {
                    out[x * m * m + e] = val;
                }
            }
            out
        };
        let full = transform(None);
        let split = weights.map(|(delta, g)| {
            let f: Vec<f64> = g.iter().map(|w| 1.0 - w).collect();
            GreenSplit {
                delta,
                f_part: transform(Some(&f)),
                g_part: transform(Some(&g)),
            }
        });
        Ok(Self {
            lattice: lat,
            t,
            full,
            split,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn split_width(&self) -> Option<f64> {
        self.split.as_ref().map(|s| s.delta)
    }

    fn block_len(&self) -> usize {
        4 * self.lattice.components * self.lattice.components
    }

    /// Column-major `2n×2n` block of `G_t` at site `x`.
    pub fn at(&self, x: usize) -> &[f64] {
        let b = self.block_len();
        &self.full[x * b..(x + 1) * b]
    }

    pub fn f_part(&self, x: usize) -> Option<&[f64]> {
        let b = self.block_len();
        self.split.as_ref().map(|s| &s.f_part[x * b..(x + 1) * b])
    }

    pub fn g_part(&self, x: usize) -> Option<&[f64]> {
        let b = self.block_len();
        self.split.as_ref().map(|s| &s.g_part[x * b..(x + 1) * b])
    }

    /// Per-site Frobenius norms of `G_t`, `G^f_t` or `G^g_t`.
    pub fn norms(&self, part: GreenPart) -> Option<Vec<f64>> {
        let data = match part {
            GreenPart::Full => &self.full,
            GreenPart::F => &self.split.as_ref()?.f_part,
            GreenPart::G => &self.split.as_ref()?.g_part,
        };
        Some(
            data.chunks(self.block_len())
                .map(|b| b.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GreenPart {
    Full,
    F,
    G,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayRow {
    pub t: f64,
    pub sup_norm_g: f64,
    pub sup_norm_f: f64,
    pub outside_cone_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayReport {
    pub rows: Vec<DecayRow>,
    /// Least-squares slope of `ln sup‖G^g_t‖` against `ln t`.
    pub slope: f64,
    pub intercept: f64,
    pub gamma_g: f64,
    pub delta: f64,
}

impl DecayReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "sup_norm_g", "sup_norm_f", "outside_cone_norm"])?;
        for r in &self.rows {
            w.write_record([
                format!("{}", r.t),
                format!("{:e}", r.sup_norm_g),
                format!("{:e}", r.sup_norm_f),
                format!("{:e}", r.outside_cone_norm),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `outside_cone_norm / sup_norm_g` at the row closest to `t`.
    pub fn cone_ratio_at(&self, t: f64) -> Option<f64> {
        self.rows
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .map(|r| r.outside_cone_norm / r.sup_norm_g)
    }
}

/// Default cone speed: 5% above the largest band speed on the grid.
pub fn default_cone_speed(table: &DispersionTable) -> f64 {
    1.05 * table.max_speed()
}

/// Sup norms of the split Green function over `times` and the fitted decay exponent.
pub fn decay_diagnostic(table: &DispersionTable, times: &[f64], split_delta: f64) -> Result<DecayReport> {
    if times.len() < 2 {
        return Err(Error::InvalidParameter("need at least two times for a fit".into()));
    }
    if times.iter().any(|t| !(*t > 0.0 && t.is_finite())) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("times must be positive and increasing".into()));
    }
    if !(split_delta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "split width must be positive, got {split_delta}"
        )));
    }
    let lat = *table.lattice();
    let gamma_g = default_cone_speed(table);
    let t_max = times[times.len() - 1];
    let reach = gamma_g * t_max;
    if reach >= lat.side as f64 / 2.0 {
        let mut required = (2.0 * reach).floor() as usize + 1;
        required += required % 2;
        return Err(Error::TorusTooSmall {
            reason: format!("light cone radius {reach:.1} reaches the torus half-width"),
            required: required.max(8),
        });
    }
    let rows = decay_rows(table, times, split_delta, gamma_g)?;
    let xs: Vec<f64> = rows.iter().map(|r| r.t.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.sup_norm_g.ln()).collect();
    let (slope, intercept) = linear_fit(&xs, &ys);
    Ok(DecayReport {
        rows,
        slope,
        intercept,
        gamma_g,
        delta: split_delta,
    })
}

fn decay_rows(table: &DispersionTable, times: &[f64], split_delta: f64, gamma_g: f64) -> Result<Vec<DecayRow>> {
    let lat = *table.lattice();
    let crit = CriticalSet::detect(
        table,
        crate::lattice::ConditionTolerances::default().hessian_tol,
        split_delta,
    );
    let g = partition_weights(&crit, split_delta);
    let radius: Vec<f64> = (0..lat.sites()).map(|x| lat.centered_norm(x)).collect();
    let mut rows = Vec::with_capacity(times.len());
    for &t in times {
        let green = GreenFunction::compute_with_weights(table, t, Some((split_delta, g.clone())))?;
        let ng = green.norms(GreenPart::G).expect("split present");
        let nf = green.norms(GreenPart::F).expect("split present");
        let cone = gamma_g * t;
        let outside = ng
            .iter()
            .zip(&radius)
            .filter(|(_, &r)| r >= cone)
            .map(|(v, _)| *v)
            .fold(0.0, f64::max);
        rows.push(DecayRow {
            t,
            sup_norm_g: ng.iter().cloned().fold(0.0, f64::max),
            sup_norm_f: nf.iter().cloned().fold(0.0, f64::max),
            outside_cone_norm: outside,
        });
    }
    Ok(rows)
}

/// Single-time row of [`decay_diagnostic`] with the default cone speed.
pub fn cone_row(table: &DispersionTable, t: f64, split_delta: f64) -> Result<DecayRow> {
    let gamma_g = default_cone_speed(table);
    if gamma_g * t >= table.lattice().side as f64 / 2.0 {
        return Err(Error::TorusTooSmall {
            reason: format!("light cone radius {:.1} reaches the torus half-width", gamma_g * t),
            required: (2.0 * gamma_g * t).ceil() as usize + 2,
        });
    }
    Ok(decay_rows(table, &[t], split_delta, gamma_g)?.remove(0))
}

/// Ordinary least squares `y ≈ a x + b`; returns `(a, b)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let a = sxy / sxx;
    (a, my - a * mx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius, identity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_table(side: usize, mass: f64) -> (ForceField, DispersionTable) {
        let lat = LatticeSpec::new(1, 1, side).unwrap();
        let f = ForceField::nearest_neighbor(lat, &[1.0], &[mass]).unwrap();
        let t = DispersionTable::build(&f, None).unwrap();
        (f, t)
    }

    fn random_field(lat: LatticeSpec, seed: u64) -> PhaseField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = lat.sites() * lat.components;
        let u = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        PhaseField::new(lat, u, v).unwrap()
    }

    #[test]
    fn propagator_examples() {
        let (_, t) = scalar_table(16, 0.0);
        let g0 = PropagatorTable::build(&t, 0.0).unwrap();
        for k in 0..16 {
            assert!(frobenius(&(g0.matrix(k) - identity(2))) < 1e-12);
        }
        // θ = π has ω = 2.
        let g = propagator_at(&t, 8, std::f64::consts::FRAC_PI_2);
        let expect = -identity(2);
        assert!(frobenius(&(g - expect)) < 1e-12);
        let g = propagator_at(&t, 0, 3.5);
        assert!((g[(0, 1)].re - 3.5).abs() < 1e-14);
    }

    #[test]
    fn energy_examples() {
        let (f, _) = scalar_table(8, 0.0);
        let lat = *f.lattice();
        assert_eq!(energy(&PhaseField::zeros(lat), &f).unwrap(), 0.0);
        let mut y = PhaseField::zeros(lat);
        y.v.iter_mut().for_each(|v| *v = 3.0);
        assert!((energy(&y, &f).unwrap() - 0.5 * 8.0 * 9.0).abs() < 1e-12);
        let mut y = PhaseField::zeros(lat);
        y.u[0] = 1.0;
        let direct: f64 = 0.5 * (0..8).map(|x| (y.u[(x + 1) % 8] - y.u[x]).powi(2)).sum::<f64>();
        assert!((energy(&y, &f).unwrap() - 1.0).abs() < 1e-14);
        assert!((direct - 1.0).abs() < 1e-14);
    }

    #[test]
    fn evolution_is_linear_and_reversible() {
        let (_, t) = scalar_table(32, 0.5);
        let lat = *t.lattice();
        let a = random_field(lat, 1);
        let b = random_field(lat, 2);
        let fwd = PropagatorTable::build(&t, 3.7).unwrap();
        let back = PropagatorTable::build(&t, -3.7).unwrap();
        let lhs = evolve(&a.combine(2.0, &b, -0.5).unwrap(), &fwd).unwrap();
        let rhs = evolve(&a, &fwd)
            .unwrap()
            .combine(2.0, &evolve(&b, &fwd).unwrap(), -0.5)
            .unwrap();
        for (x, y) in lhs.u.iter().zip(&rhs.u) {
            assert!((x - y).abs() < 1e-10);
        }
        let round = evolve(&evolve(&a, &fwd).unwrap(), &back).unwrap();
        for (x, y) in round.u.iter().zip(&a.u).chain(round.v.iter().zip(&a.v)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn snapshots_round_trip() {
        let lat = LatticeSpec::new(2, 2, 8).unwrap();
        let y = random_field(lat, 7);
        let mut buf = Vec::new();
        y.write_binary(&mut buf).unwrap();
        assert_eq!(PhaseField::read_binary(buf.as_slice()).unwrap(), y);
        let mut text = Vec::new();
        y.write_csv(&mut text).unwrap();
        let back = PhaseField::read_csv(lat, text.as_slice()).unwrap();
        for (a, b) in back.u.iter().zip(&y.u) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn green_function_at_zero_is_delta() {
        let (_, t) = scalar_table(16, 1.0);
        let g = GreenFunction::compute(&t, 0.0, Some(0.5)).unwrap();
        for x in 0..16 {
            let b = g.at(x);
            let expect = if x == 0 { [1.0, 0.0, 0.0, 1.0] } else { [0.0; 4] };
            for (a, e) in b.iter().zip(expect) {
                assert!((a - e).abs() < 1e-10);
            }
            let f = g.f_part(x).unwrap();
            let gg = g.g_part(x).unwrap();
            for i in 0..4 {
                assert!((f[i] + gg[i] - b[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn wraparound_guard_refuses() {
        let (_, t) = scalar_table(64, 1.0);
        match decay_diagnostic(&t, &[10.0, 100.0], 0.5) {
            Err(Error::TorusTooSmall { required, .. }) => assert!(required > 64 && required % 2 == 0),
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn transition_is_smooth_partition() {
        assert_eq!(smooth_transition(-1.0), 0.0);
        assert_eq!(smooth_transition(2.0), 1.0);
        assert!((smooth_transition(0.5) - 0.5).abs() < 1e-15);
        assert!((smooth_transition(0.3) + smooth_transition(0.7) - 1.0).abs() < 1e-15);
    }
}
