//! Named experiments. Each one binds samplers, exact evolution, estimators and the
//! closed-form predictions into verdicts, and renders its data as CSV tables.

use std::path::PathBuf;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{
    components_from_fourier, cone_row, decay_diagnostic, evolve_with, PhaseField, PropagatorTable,
};
use crate::export::{covariance_table, wigner_table, EstimateTable};
use crate::grid::LatticeSpec;
use crate::kinetic::{
    limit_covariance, local_covariance, project_profile, projected_wigner, stationarity_check,
    transport_evolve, transport_pde_oracle, RGrid,
};
use crate::lattice::{DispersionTable, ForceField};
use crate::linalg::{matvec, CMat, MatField};
use crate::mc::{ordered_map, sample_rng, BATCH};
use crate::random_fields::{
    HomogeneousSampler, HomogeneousSpectrum, NoiseKind, ProfileSpec, SlowFamilyConfig,
    SlowFamilySampler, SlowProfile,
};
use crate::statistics::{
    aa_accumulator, all_sites, axis_offsets, characteristic_functional, fourth_cumulant_test,
    AFieldMap, ComplexMoments, CovarianceAccumulator, PairAccumulator, Probe, Taper,
    WignerAccumulator, WignerWindow,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    HomogeneousConvergence,
    GreenDecay,
    KineticWigner,
    LocalStationarity,
    Gaussianization,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::HomogeneousConvergence,
        ExperimentKind::GreenDecay,
        ExperimentKind::KineticWigner,
        ExperimentKind::LocalStationarity,
        ExperimentKind::Gaussianization,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::HomogeneousConvergence => "homogeneous-convergence",
            ExperimentKind::GreenDecay => "green-decay",
            ExperimentKind::KineticWigner => "kinetic-wigner",
            ExperimentKind::LocalStationarity => "local-stationarity",
            ExperimentKind::Gaussianization => "gaussianization",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == name)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown experiment '{name}'")))
    }
}

/// Where the force field comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    NearestNeighbor {
        dim: usize,
        side: usize,
        gammas: Vec<f64>,
        masses: Vec<f64>,
    },
    File {
        path: PathBuf,
    },
}

impl ModelSource {
    pub fn load(&self) -> Result<ForceField> {
        match self {
            ModelSource::NearestNeighbor {
                dim,
                side,
                gammas,
                masses,
            } => ForceField::nearest_neighbor(LatticeSpec::new(*dim, gammas.len(), *side)?, gammas, masses),
            ModelSource::File { path } => ForceField::load(path),
        }
    }
}

/// The same couplings on a torus of another side.
pub fn resized(field: &ForceField, side: usize) -> Result<ForceField> {
    let lat = field.lattice();
    ForceField::new(
        LatticeSpec::new(lat.dim, lat.components, side)?,
        field.entries().map(|(z, m)| (z.clone(), m.clone())).collect(),
    )
}

/// Homogeneous input spectra.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectrumSource {
    /// `q̂⁰⁰ = TΩ⁻²`, `q̂¹¹ = T`.
    Gibbs { temperature: f64 },
    /// `q̂⁰⁰ = T(1 + a s²)Ω⁻²`, `q̂¹¹ = T(1 − a s²)`, `s² = mean_i sin²θ_i`.
    Perturbed { temperature: f64, amplitude: f64 },
}

impl SpectrumSource {
    pub fn build(&self, table: &DispersionTable) -> Result<HomogeneousSpectrum> {
        match *self {
            SpectrumSource::Gibbs { temperature } => HomogeneousSpectrum::gibbs(table, temperature),
            SpectrumSource::Perturbed { temperature, amplitude } => {
                if !(temperature >= 0.0 && amplitude.abs() < 1.0) {
                    return Err(Error::SpectrumInvalid("need T >= 0 and |amplitude| < 1".into()));
                }
                let lat = *table.lattice();
                let n = lat.components;
                let tol = table.singular_tol();
                HomogeneousSpectrum::from_fn(lat, |k| {
                    let th = lat.theta(k);
                    let s2 = th.iter().map(|t| t.sin().powi(2)).sum::<f64>() / th.len() as f64;
                    let inv2 = table.apply_fn(k, |w| if w < tol { 0.0 } else { 1.0 / (w * w) });
                    let q00 = inv2 * Complex64::new(temperature * (1.0 + amplitude * s2), 0.0);
                    let q11 = CMat::identity(n, n) * Complex64::new(temperature * (1.0 - amplitude * s2), 0.0);
                    crate::linalg::join_blocks(&[[q00, CMat::zeros(n, n)], [CMat::zeros(n, n), q11]])
                })
            }
        }
    }
}

fn default_sigma() -> f64 {
    4.0
}

fn default_beta() -> f64 {
    0.8
}

fn default_cap() -> f64 {
    8192.0
}

/// Full description of one run. JSON field names double as override paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: ModelSource,
    #[serde(default)]
    pub spectrum: Option<SpectrumSource>,
    #[serde(default)]
    pub profile: Option<ProfileSpec>,
    pub epsilons: Vec<f64>,
    pub samples: usize,
    pub times: Vec<f64>,
    pub taus: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub noise: NoiseKind,
    /// Macroscopic observation point.
    pub r: Vec<f64>,
    /// Macroscopic box; the torus side at scale ε is `box_length / ε`.
    pub box_length: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub offset_radius: i64,
    #[serde(default)]
    pub split_delta: Option<f64>,
    #[serde(default)]
    pub slope_tolerance: Option<f64>,
    pub cone_time: f64,
    pub stationarity_times: Vec<f64>,
    pub stationarity_sample_times: Vec<f64>,
    #[serde(default)]
    pub wigner_ymax: Option<usize>,
    pub taper: Taper,
    pub transport_theta_side: usize,
    /// Time for the transport solver comparison; long enough for many upwind steps.
    pub transport_tau: f64,
    pub transport_cells: Vec<usize>,
    pub bootstrap: usize,
    #[serde(default = "default_cap")]
    pub memory_cap_mb: f64,
}

fn nn(dim: usize, side: usize) -> ModelSource {
    ModelSource::NearestNeighbor {
        dim,
        side,
        gammas: vec![1.0],
        masses: vec![1.0],
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for each experiment.
    pub fn default_for(kind: ExperimentKind) -> Self {
        let base = ExperimentConfig {
            experiment: kind,
            model: nn(1, 4096),
            spectrum: None,
            profile: None,
            epsilons: vec![1.0 / 64.0],
            samples: 2048,
            times: vec![10.0, 200.0],
            taus: vec![0.5],
            seed: 20240611,
            out: None,
            threads: None,
            sigma: 4.0,
            noise: NoiseKind::Gaussian,
            r: vec![28.0],
            box_length: 64.0,
            beta: 0.8,
            offset_radius: 8,
            split_delta: None,
            slope_tolerance: None,
            cone_time: 50.0,
            stationarity_times: vec![1.0, 7.3, 50.0],
            stationarity_sample_times: vec![0.0, 25.0, 50.0],
            wigner_ymax: None,
            taper: Taper::Triangular,
            transport_theta_side: 64,
            transport_tau: 16.0,
            transport_cells: vec![64, 128, 256],
            bootstrap: 200,
            memory_cap_mb: 8192.0,
        };
        match kind {
            ExperimentKind::HomogeneousConvergence => ExperimentConfig {
                spectrum: Some(SpectrumSource::Perturbed {
                    temperature: 1.0,
                    amplitude: 0.9,
                }),
                ..base
            },
            ExperimentKind::GreenDecay => ExperimentConfig {
                model: nn(1, 8192),
                samples: 2,
                times: (0..8).map(|i| 10.0 * 10f64.powf(i as f64 / 7.0)).collect(),
                ..base
            },
            ExperimentKind::KineticWigner => ExperimentConfig {
                profile: Some(ProfileSpec::WavePacket {
                    base: 1.0,
                    amplitude: 1.0,
                    center: vec![32.0],
                    width: 4.0,
                    theta0: vec![std::f64::consts::FRAC_PI_2],
                    kappa: 4.0,
                    period: Some(64.0),
                }),
                epsilons: vec![1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0],
                samples: 1024,
                ..base
            },
            ExperimentKind::LocalStationarity | ExperimentKind::Gaussianization => ExperimentConfig {
                profile: Some(ProfileSpec::ThermalGradient {
                    base: 1.0,
                    amplitude: 0.3,
                    center: vec![32.0],
                    width: 8.0,
                    period: Some(64.0),
                }),
                noise: NoiseKind::Uniform,
                samples: 8192,
                offset_radius: 4,
                ..base
            },
        }
    }

    /// Checks that do not need the model.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        let lists: [(&str, usize); 6] = [
            ("epsilons", self.epsilons.len()),
            ("times", self.times.len()),
            ("taus", self.taus.len()),
            ("stationarity_times", self.stationarity_times.len()),
            ("stationarity_sample_times", self.stationarity_sample_times.len()),
            ("transport_cells", self.transport_cells.len()),
        ];
        for (name, len) in lists {
            if len == 0 {
                return bad(&format!("{name} must not be empty"));
            }
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return bad("epsilon values must lie in (0,1)");
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return bad("epsilon values must be strictly decreasing");
        }
        if self.times.iter().any(|t| !(*t > 0.0 && t.is_finite())) || self.times.windows(2).any(|w| w[1] <= w[0]) {
            return bad("times must be positive and increasing");
        }
        let finite_nonneg = |v: &[f64]| v.iter().all(|t| *t >= 0.0 && t.is_finite());
        if !finite_nonneg(&self.taus) || !finite_nonneg(&self.stationarity_times) || !finite_nonneg(&self.stationarity_sample_times) {
            return bad("taus and stationarity times must be finite and nonnegative");
        }
        if self.samples < 2 {
            return bad("samples must be at least 2");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(self.beta > 0.5 && self.beta < 1.0) {
            return bad("beta must lie in (1/2, 1)");
        }
        if !(self.box_length > 0.0) || !(self.cone_time > 0.0) || !(self.memory_cap_mb > 0.0) {
            return bad("box_length, cone_time and memory_cap_mb must be positive");
        }
        if !(self.transport_tau > 0.0 && self.transport_tau.is_finite()) {
            return bad("transport_tau must be positive");
        }
        if self.offset_radius < 0 {
            return bad("offset_radius must be nonnegative");
        }
        if self.transport_cells.windows(2).any(|w| w[1] <= w[0]) || self.transport_cells[0] < 2 {
            return bad("transport_cells must increase from at least 2");
        }
        if self.experiment == ExperimentKind::KineticWigner && self.transport_cells.len() < 3 {
            return bad("transport_cells needs three refinements for an order estimate");
        }
        if self.threads == Some(0) {
            return bad("threads must be positive");
        }
        Ok(())
    }

    /// Torus side at scale `epsilon`.
    pub fn side_for(&self, epsilon: f64) -> Result<usize> {
        let side = (self.box_length / epsilon).round() as usize;
        if side % 2 != 0 || ((side as f64) * epsilon - self.box_length).abs() > 1e-9 * self.box_length {
            return Err(Error::InvalidParameter(format!(
                "box_length / epsilon = {} is not an even integer",
                self.box_length / epsilon
            )));
        }
        Ok(side)
    }
}

/// One pass/fail assertion with the measured value and its threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Verdict {
    fn below(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass: value < threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }
}

/// CSV output kept in memory until the caller writes it.
#[derive(Clone, Debug, PartialEq)]
pub struct DataFile {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub experiment: ExperimentKind,
    pub verdicts: Vec<Verdict>,
    pub files: Vec<DataFile>,
    pub notes: Vec<String>,
}

impl ExperimentOutcome {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }
}

fn table_file(name: String, table: &EstimateTable) -> Result<DataFile> {
    let mut bytes = Vec::new();
    table.write_csv(&mut bytes)?;
    Ok(DataFile { name, bytes })
}

fn csv_file(name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<DataFile> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(DataFile {
        name: name.into(),
        bytes,
    })
}

fn stream(scale: usize, index: usize) -> u64 {
    ((scale as u64) << 40) | index as u64
}

/// Rough peak working set in MB for a run on a torus of side `side`.
pub fn estimate_memory_mb(dim: usize, components: usize, side: usize, kind: ExperimentKind) -> f64 {
    let n = components as f64;
    let d = dim as f64;
    let table = 96.0 * n * n + 8.0 * n * (d * d + d + 4.0);
    let fields = match kind {
        ExperimentKind::GreenDecay => 16.0 * 4.0 * n * n * 4.0,
        _ => BATCH as f64 * 2.0 * n * 48.0 + 3.0 * 4.0 * n * n * 16.0,
    };
    (side as f64).powi(dim as i32) * (table + fields) / (1024.0 * 1024.0)
}

fn resource_guard(cfg: &ExperimentConfig, field: &ForceField) -> Result<()> {
    let lat = field.lattice();
    let side = match cfg.experiment {
        ExperimentKind::KineticWigner | ExperimentKind::LocalStationarity | ExperimentKind::Gaussianization => {
            cfg.side_for(cfg.epsilons[cfg.epsilons.len() - 1])?
        }
        _ => lat.side,
    };
    let est = estimate_memory_mb(lat.dim, lat.components, side, cfg.experiment);
    if est > cfg.memory_cap_mb {
        let per_site = est / (side as f64).powi(lat.dim as i32);
        let mut s = ((cfg.memory_cap_mb / per_site).powf(1.0 / lat.dim as f64)).floor() as usize;
        s -= s % 2;
        return Err(Error::ResourceLimit {
            estimated_mb: est,
            cap_mb: cfg.memory_cap_mb,
            suggested_side: s.max(8),
        });
    }
    Ok(())
}

/// Validates, applies the resource guard and runs the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let field = cfg.model.load()?;
    resource_guard(cfg, &field)?;
    match cfg.experiment {
        ExperimentKind::HomogeneousConvergence => homogeneous_convergence(cfg, &field),
        ExperimentKind::GreenDecay => green_decay(cfg, &field),
        ExperimentKind::KineticWigner => kinetic_wigner(cfg, &field),
        ExperimentKind::LocalStationarity => local_stationarity(cfg, &field),
        ExperimentKind::Gaussianization => gaussianization(cfg, &field),
    }
}

fn tag(t: f64) -> String {
    format!("{t}").replace('.', "p")
}

/// Translation-averaged covariance and aa-covariance at each time from homogeneous samples.
struct HomogeneousRun {
    cov: Vec<CovarianceAccumulator>,
    aa: Vec<PairAccumulator>,
}

fn homogeneous_samples(
    spectrum: &HomogeneousSpectrum,
    table: &DispersionTable,
    times: &[f64],
    offsets: &[Vec<i64>],
    samples: usize,
    seed: u64,
    scale: usize,
    noise: NoiseKind,
) -> Result<HomogeneousRun> {
    let lat = *table.lattice();
    let sampler = HomogeneousSampler::new(spectrum)?;
    let map = AFieldMap::new(table, true)?;
    let props = times
        .iter()
        .map(|&t| PropagatorTable::build(table, t))
        .collect::<Result<Vec<_>>>()?;
    let bases = all_sites(&lat);
    let cov_proto = CovarianceAccumulator::over_points(lat, bases.clone(), offsets.to_vec())?;
    let aa_proto = aa_accumulator(lat, bases, offsets.to_vec())?;
    let mut run = HomogeneousRun {
        cov: vec![cov_proto.clone(); times.len()],
        aa: vec![aa_proto.clone(); times.len()],
    };
    ordered_map(
        samples,
        |i| {
            let mut rng = sample_rng(seed, stream(scale, i));
            let (u0, v0) = sampler.sample_fourier(&mut rng, noise);
            props
                .iter()
                .map(|p| {
                    let (mut uh, mut vh) = (u0.clone(), v0.clone());
                    p.apply_fourier(&mut uh, &mut vh);
                    let mut a = map.apply_fourier(&uh, &vh);
                    map.from_fourier_in_place(&mut a);
                    let y = PhaseField::from_fourier(lat, map.fft(), uh, vh);
                    (cov_proto.observe(&y), aa_proto.observe(&a))
                })
                .collect::<Vec<_>>()
        },
        |_, obs| {
            for (j, (c, a)) in obs.into_iter().enumerate() {
                run.cov[j].push_observation(&c);
                run.aa[j].push_observation(&a);
            }
        },
    );
    Ok(run)
}

fn homogeneous_convergence(cfg: &ExperimentConfig, field: &ForceField) -> Result<ExperimentOutcome> {
    let table = DispersionTable::build(field, None)?;
    let lat = *table.lattice();
    let source = cfg.spectrum.clone().unwrap_or(SpectrumSource::Perturbed {
        temperature: 1.0,
        amplitude: 0.9,
    });
    let spectrum = source.build(&table)?;
    let limit = limit_covariance(&spectrum, &table)?;
    let offsets = axis_offsets(lat.dim, cfg.offset_radius);
    let theory = |o: &[i64]| limit.correlation(o);
    let zero = |_: &[i64]| CMat::zeros(lat.components, lat.components);
    let mut files = vec![table_file("limit_theory.csv".into(), &covariance_table(&offsets, theory))?];
    let mut verdicts = Vec::new();
    let mut notes = vec![format!("masked singular points: {}", limit.masked.len())];

    let run = homogeneous_samples(&spectrum, &table, &cfg.times, &offsets, cfg.samples, cfg.seed, 0, cfg.noise)?;
    let mut l1 = Vec::new();
    let mut aa_last = 0.0;
    let mut z_last = 0.0;
    for (j, &t) in cfg.times.iter().enumerate() {
        let est = run.cov[j].finish()?;
        let aa = run.aa[j].finish()?;
        let floor: f64 = (0..est.offsets.len())
            .map(|o| {
                (0..est.width * est.width)
                    .map(|e| est.stderr(o, e / est.width, e % est.width))
                    .sum::<f64>()
            })
            .sum();
        l1.push((est.l1_distance(theory), floor));
        z_last = est.max_z(theory);
        aa_last = aa.max_z(zero);
        files.push(table_file(format!("covariance_t{}.csv", tag(t)), &est.to_table())?);
        files.push(table_file(format!("aa_t{}.csv", tag(t)), &aa.to_table())?);
    }
    let t_last = cfg.times[cfg.times.len() - 1];
    verdicts.push(Verdict::below(
        "limit-z",
        z_last,
        cfg.sigma,
        format!("max z of the covariance against the limit at t = {t_last}"),
    ));
    let (d0, f0) = l1[0];
    let (d1, f1) = l1[l1.len() - 1];
    let settled = d0 <= cfg.sigma * f0 && d1 <= cfg.sigma * f1;
    verdicts.push(Verdict {
        name: "l1-contraction".into(),
        pass: d1 < 0.25 * d0 || settled,
        value: d1 / d0,
        threshold: 0.25,
        detail: format!(
            "L1 distance {d0:.4e} at t = {} and {d1:.4e} at t = {t_last}{}",
            cfg.times[0],
            if settled { "; both within noise" } else { "" }
        ),
    });
    verdicts.push(Verdict::below(
        "aa-decay",
        aa_last,
        cfg.sigma,
        format!("max z of the aa-covariance against 0 at t = {t_last}"),
    ));
    files.push(csv_file(
        "l1.csv",
        &["t", "l1_distance", "l1_noise"],
        cfg.times
            .iter()
            .zip(&l1)
            .map(|(t, (d, f))| vec![t.to_string(), format!("{d:e}"), format!("{f:e}")])
            .collect(),
    )?);

    let dev = cfg
        .stationarity_times
        .iter()
        .map(|&t| stationarity_check(&limit.data, &table, t))
        .fold(0.0, f64::max);
    verdicts.push(Verdict::below(
        "stationarity-theory",
        dev,
        1e-8,
        "max Frobenius deviation of G q G* from q over the stationarity times",
    ));

    let stationary = limit.to_spectrum()?;
    let run = homogeneous_samples(
        &stationary,
        &table,
        &cfg.stationarity_sample_times,
        &offsets,
        cfg.samples,
        cfg.seed,
        1,
        NoiseKind::Gaussian,
    )?;
    let mut zmax: f64 = 0.0;
    for (j, &t) in cfg.stationarity_sample_times.iter().enumerate() {
        let est = run.cov[j].finish()?;
        zmax = zmax.max(est.max_z(theory));
        files.push(table_file(format!("stationary_t{}.csv", tag(t)), &est.to_table())?);
    }
    verdicts.push(Verdict::below(
        "stationarity-empirical",
        zmax,
        cfg.sigma,
        "max z of the covariance of stationary samples against the limit",
    ));
    notes.push(format!("spectrum: {source:?}"));
    Ok(ExperimentOutcome {
        experiment: cfg.experiment,
        verdicts,
        files,
        notes,
    })
}

fn green_decay(cfg: &ExperimentConfig, field: &ForceField) -> Result<ExperimentOutcome> {
    let table = DispersionTable::build(field, None)?;
    let d = table.lattice().dim;
    let delta = cfg.split_delta.unwrap_or(if d == 1 { 1.0 } else { 0.5 });
    let tol = cfg.slope_tolerance.unwrap_or(if d == 1 { 0.1 } else { 0.15 });
    let report = decay_diagnostic(&table, &cfg.times, delta)?;
    let target = -(d as f64) / 2.0;
    let mut bytes = Vec::new();
    report.write_csv(&mut bytes)?;
    let cone = cone_row(&table, cfg.cone_time, delta)?;
    let ratio = cone.outside_cone_norm / cone.sup_norm_g;
    let verdicts = vec![
        Verdict {
            name: "decay-slope".into(),
            pass: (report.slope - target).abs() <= tol,
            value: report.slope,
            threshold: tol,
            detail: format!("fitted slope against {target} +/- {tol}"),
        },
        Verdict::below(
            "outside-cone",
            ratio,
            1e-6,
            format!("outside/inside sup ratio at t = {} with cone speed {:.4}", cfg.cone_time, report.gamma_g),
        ),
    ];
    let files = vec![
        DataFile {
            name: "decay.csv".into(),
            bytes,
        },
        csv_file(
            "cone.csv",
            &["t", "sup_norm_g", "outside_cone_norm", "ratio", "gamma_g"],
            vec![vec![
                cone.t.to_string(),
                format!("{:e}", cone.sup_norm_g),
                format!("{:e}", cone.outside_cone_norm),
                format!("{ratio:e}"),
                format!("{:e}", report.gamma_g),
            ]],
        )?,
    ];
    Ok(ExperimentOutcome {
        experiment: cfg.experiment,
        verdicts,
        files,
        notes: vec![format!("split width {delta}, cone speed {:.6}", report.gamma_g)],
    })
}

fn profile_spec(cfg: &ExperimentConfig) -> Result<&ProfileSpec> {
    cfg.profile
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter(format!("{} needs a profile", cfg.experiment.as_str())))
}

fn kinetic_wigner(cfg: &ExperimentConfig, field: &ForceField) -> Result<ExperimentOutcome> {
    let spec = profile_spec(cfg)?;
    let tau = cfg.taus[0];
    let mut files = Vec::new();
    let mut rows = Vec::new();
    let mut dists = Vec::new();
    let mut doubled = None;
    for (e, &eps) in cfg.epsilons.iter().enumerate() {
        let side = cfg.side_for(eps)?;
        let f = Arc::new(resized(field, side)?);
        let table = DispersionTable::build(&f, None)?;
        let lat = *table.lattice();
        if cfg.r.len() != lat.dim {
            return Err(Error::InvalidParameter(format!("r must have {} coordinates", lat.dim)));
        }
        let profile = spec.build(f.clone())?;
        let sfc = SlowFamilyConfig::new(eps, cfg.beta, cfg.noise, side)?;
        let sampler = SlowFamilySampler::new(&*profile, lat, sfc)?;
        let prop = PropagatorTable::build(&table, tau / eps)?;
        let map = AFieldMap::new(&table, true)?;
        let window = WignerWindow {
            tau,
            epsilon: eps,
            r: cfg.r.clone(),
            ymax: cfg.wigner_ymax.unwrap_or(sfc.block_side / 2),
            taper: cfg.taper,
        };
        let last = e + 1 == cfg.epsilons.len();
        let mut acc = WignerAccumulator::new(lat, window.clone())?;
        // the smallest scale also runs a doubled window on the same samples
        let mut wide = if last {
            Some(WignerAccumulator::new(
                lat,
                WignerWindow {
                    ymax: 2 * window.ymax,
                    ..window
                },
            )?)
        } else {
            None
        };
        {
            let (proto, proto_wide) = (acc.clone(), wide.clone());
            ordered_map(
                cfg.samples,
                |i| {
                    let y = sampler.sample(&mut sample_rng(cfg.seed, stream(e, i)));
                    let y = evolve_with(&y, &prop, map.fft());
                    let a = map.apply(&y).expect("same lattice");
                    (proto.observe(&a), proto_wide.as_ref().map(|w| w.observe(&a)))
                },
                |_, (obs, obs_wide)| {
                    acc.push_observation(&obs);
                    if let (Some(w), Some(o)) = (wide.as_mut(), obs_wide) {
                        w.push_observation(&o);
                    }
                },
            );
        }
        let est = acc.finish()?;
        let theory = projected_wigner(&*profile, &table, tau, &cfg.r);
        let mask: Vec<bool> = (0..lat.sites()).map(|k| table.is_singular(k)).collect();
        let (dist, se) = est.l1_distance(&theory, &mask);
        dists.push((dist, se));
        if let Some(w) = wide.take() {
            let (dw, sw) = w.finish()?.l1_distance(&theory, &mask);
            doubled = Some((dw, sw, dist, se));
        }
        rows.push(vec![
            format!("{eps:e}"),
            side.to_string(),
            sfc.block_side.to_string(),
            format!("{dist:e}"),
            format!("{se:e}"),
            mask.iter().filter(|m| **m).count().to_string(),
        ]);
        files.push(table_file(format!("wigner_eps{e}.csv"), &est.to_table())?);
        files.push(table_file(format!("wigner_theory_eps{e}.csv"), &wigner_table(&theory))?);
    }
    files.push(csv_file(
        "convergence.csv",
        &["epsilon", "side", "block_side", "l1_distance", "l1_stderr", "masked"],
        rows,
    )?);
    let monotone = dists.windows(2).all(|w| w[1].0 < w[0].0);
    let (d_last, se_last) = dists[dists.len() - 1];
    let mut verdicts = vec![
        Verdict {
            name: "monotone-decrease".into(),
            pass: monotone,
            value: if dists.len() > 1 { d_last / dists[0].0 } else { 1.0 },
            threshold: 1.0,
            detail: format!(
                "L1 distances {:?}",
                dists.iter().map(|(d, _)| format!("{d:.4e}")).collect::<Vec<_>>()
            ),
        },
        Verdict::below(
            "smallest-scale-noise",
            d_last / se_last,
            2.0,
            format!("distance {d_last:.4e} in units of its standard error {se_last:.4e}"),
        ),
    ];

    if let Some((dw, sw, d, se)) = doubled {
        let gap = (dw - d).abs();
        let bound = 2.0 * se.max(sw);
        verdicts.push(Verdict::below(
            "window-doubling",
            gap,
            bound,
            format!("L1 distance {d:.4e} with the default window and {dw:.4e} with it doubled"),
        ));
    }

    let theta_field = Arc::new(resized(field, cfg.transport_theta_side)?);
    let table = DispersionTable::build(&theta_field, None)?;
    let profile = spec.build(theta_field.clone())?;
    let mut errs = Vec::new();
    for &cells in &cfg.transport_cells {
        let rg = RGrid::new(table.lattice().dim, cells, cfg.box_length)?;
        let s0 = project_profile(&*profile, &table, rg)?;
        let exact = transport_evolve(&s0, cfg.transport_tau);
        let pde = transport_pde_oracle(&s0, cfg.transport_tau, 0.9)?;
        errs.push((cells, rg.spacing(), exact.l1_distance(&pde)?));
    }
    let k = errs.len();
    let ratio = errs[k - 1].2 / errs[k - 2].2;
    verdicts.push(Verdict {
        name: "transport-first-order".into(),
        pass: (0.4..=0.6).contains(&ratio),
        value: ratio,
        threshold: 0.5,
        detail: "L1 gap ratio under r-grid doubling, accepted in [0.4, 0.6]".into(),
    });
    files.push(csv_file(
        "transport.csv",
        &["cells", "spacing", "l1_gap"],
        errs.iter()
            .map(|(c, h, e)| vec![c.to_string(), format!("{h:e}"), format!("{e:e}")])
            .collect(),
    )?);
    Ok(ExperimentOutcome {
        experiment: cfg.experiment,
        verdicts,
        files,
        notes: vec![],
    })
}

/// Model, profile and sampler shared by the two slow-family experiments at scale `epsilons[0]`.
struct SlowSetup {
    table: DispersionTable,
    profile: Arc<dyn SlowProfile>,
    sampler: SlowFamilySampler,
    prop: PropagatorTable,
    x0: usize,
    tau: f64,
    epsilon: f64,
}

fn slow_setup(cfg: &ExperimentConfig, field: &ForceField) -> Result<SlowSetup> {
    let spec = profile_spec(cfg)?;
    let eps = cfg.epsilons[0];
    let side = cfg.side_for(eps)?;
    let f = Arc::new(resized(field, side)?);
    let table = DispersionTable::build(&f, None)?;
    let lat = *table.lattice();
    if cfg.r.len() != lat.dim {
        return Err(Error::InvalidParameter(format!("r must have {} coordinates", lat.dim)));
    }
    let profile = spec.build(f.clone())?;
    let sfc = SlowFamilyConfig::new(eps, cfg.beta, cfg.noise, side)?;
    let sampler = SlowFamilySampler::new(&*profile, lat, sfc)?;
    let tau = cfg.taus[0];
    let prop = PropagatorTable::build(&table, tau / eps)?;
    let site: Vec<i64> = cfg.r.iter().map(|r| (r / eps).floor() as i64).collect();
    Ok(SlowSetup {
        x0: lat.wrap_index(&site),
        table,
        profile,
        sampler,
        prop,
        tau,
        epsilon: eps,
    })
}

fn local_stationarity(cfg: &ExperimentConfig, field: &ForceField) -> Result<ExperimentOutcome> {
    let s = slow_setup(cfg, field)?;
    let lat = *s.table.lattice();
    let n = lat.components;
    let q = local_covariance(&*s.profile, &s.table, s.tau, &cfg.r)?;
    let offsets = axis_offsets(lat.dim, cfg.offset_radius);
    let theory = |o: &[i64]| q.correlation(o);
    let cov_proto = CovarianceAccumulator::at_point(lat, s.x0, offsets.clone())?;
    let eq_proto = PairAccumulator::new(lat, 2 * n, offsets.clone(), vec![s.x0], false)?;
    let fft = crate::fft::TorusFft::for_lattice(&lat);
    let tol = s.table.singular_tol();
    let half = |p: f64| {
        MatField::from_fn(lat.sites(), n, n, |k| {
            s.table.apply_fn(k, |w| if w < tol { 0.0 } else { w.powf(p) })
        })
    };
    let (sq, isq) = (half(0.5), half(-0.5));
    let mut cov = cov_proto.clone();
    let m = 2 * n;
    let mut diff = ComplexMoments::new(offsets.len() * n * n);
    ordered_map(
        cfg.samples,
        |i| {
            let y = s.sampler.sample(&mut sample_rng(cfg.seed, stream(0, i)));
            let y = evolve_with(&y, &s.prop, &fft);
            let (uh, vh) = y.to_fourier(&fft);
            let mut ph = vec![Complex64::new(0.0, 0.0); uh.len()];
            let mut sh = vec![Complex64::new(0.0, 0.0); vh.len()];
            for k in 0..lat.sites() {
                matvec(sq.slice(k), &uh[k * n..(k + 1) * n], &mut ph[k * n..(k + 1) * n]);
                matvec(isq.slice(k), &vh[k * n..(k + 1) * n], &mut sh[k * n..(k + 1) * n]);
            }
            let p = components_from_fourier(&fft, ph, n);
            let sv = components_from_fourier(&fft, sh, n);
            let mut joined = vec![Complex64::new(0.0, 0.0); lat.sites() * m];
            for x in 0..lat.sites() {
                for j in 0..n {
                    joined[x * m + j] = p[x * n + j].into();
                    joined[x * m + n + j] = sv[x * n + j].into();
                }
            }
            let eq = eq_proto.observe(&joined);
            let mut d = vec![Complex64::new(0.0, 0.0); offsets.len() * n * n];
            for o in 0..offsets.len() {
                for r in 0..n {
                    for c in 0..n {
                        d[(o * n + r) * n + c] = eq[o * m * m + r * m + c] - eq[o * m * m + (n + r) * m + n + c];
                    }
                }
            }
            (cov_proto.observe(&y), d)
        },
        |_, (c, d)| {
            cov.push_observation(&c);
            diff.push(&d);
        },
    );
    let est = cov.finish()?;
    let z_cov = est.max_z(theory);
    let (se_re, _) = diff.stderr();
    let mut eq_table = EstimateTable::default();
    let mut z_eq: f64 = 0.0;
    for (i, mean) in diff.mean().iter().enumerate() {
        z_eq = z_eq.max(crate::statistics::z_value(mean.re, se_re[i]));
        eq_table.push(i / (n * n), "pp-ss", (i / n) % n, i % n, *mean, se_re[i]);
    }
    let defect = q.equipartition_defect(&s.table).max(q.antisymmetry_defect());
    let verdicts = vec![
        Verdict::below(
            "local-covariance-z",
            z_cov,
            cfg.sigma,
            format!("max z near site {} at t = {}", s.x0, s.tau / s.epsilon),
        ),
        Verdict::below(
            "equipartition-theory",
            defect,
            1e-8,
            "max of |Omega q00 - Omega^-1 q11| and |q01 + q10|",
        ),
        Verdict::below(
            "cross-check",
            q.cross_check,
            1e-8,
            "relative gap between the two constructions of the local covariance",
        ),
        Verdict::below(
            "equipartition-empirical",
            z_eq,
            cfg.sigma,
            "max z of cov(Omega^1/2 u) - cov(Omega^-1/2 v)",
        ),
    ];
    let files = vec![
        table_file("local_covariance.csv".into(), &est.to_table())?,
        table_file("local_theory.csv".into(), &covariance_table(&offsets, theory))?,
        table_file("equipartition.csv".into(), &eq_table)?,
    ];
    Ok(ExperimentOutcome {
        experiment: cfg.experiment,
        verdicts,
        files,
        notes: vec![format!("masked singular points: {}", q.masked.len())],
    })
}

fn gaussianization(cfg: &ExperimentConfig, field: &ForceField) -> Result<ExperimentOutcome> {
    let s = slow_setup(cfg, field)?;
    let lat = *s.table.lattice();
    let probe = Probe::single(s.x0, 1, 0);
    let fft = crate::fft::TorusFft::for_lattice(&lat);
    let mut before = Vec::with_capacity(cfg.samples);
    let mut after = Vec::with_capacity(cfg.samples);
    ordered_map(
        cfg.samples,
        |i| {
            let y = s.sampler.sample(&mut sample_rng(cfg.seed, stream(0, i)));
            let yt = evolve_with(&y, &s.prop, &fft);
            (probe.evaluate(&y), probe.evaluate(&yt))
        },
        |_, (a, b)| {
            before.push(a);
            after.push(b);
        },
    );
    let k0 = fourth_cumulant_test(&before, cfg.bootstrap, cfg.seed)?;
    let k1 = fourth_cumulant_test(&after, cfg.bootstrap, cfg.seed.wrapping_add(1))?;
    let q = local_covariance(&*s.profile, &s.table, s.tau, &cfg.r)?;
    let qf = probe.quadratic_form(&lat, |o| q.correlation(o));
    let ch = characteristic_functional(&after, qf)?;
    let t = s.tau / s.epsilon;
    let verdicts = vec![
        Verdict {
            name: "initial-non-gaussian".into(),
            pass: k0.z() > 5.0,
            value: k0.z(),
            threshold: 5.0,
            detail: format!("excess kurtosis {:.4} +/- {:.4} at t = 0", k0.value, k0.stderr),
        },
        Verdict::below(
            "final-gaussian",
            k1.z(),
            cfg.sigma,
            format!("excess kurtosis {:.4} +/- {:.4} at t = {t}", k1.value, k1.stderr),
        ),
        Verdict::below(
            "characteristic-functional",
            ch.z(),
            cfg.sigma,
            format!("E exp(i xi) = {:.4} against {:.4}", ch.empirical, ch.theory),
        ),
    ];
    let rows = [(0.0, &k0), (t, &k1)]
        .iter()
        .map(|(t, k)| {
            vec![
                t.to_string(),
                format!("{:e}", k.value),
                format!("{:e}", k.stderr),
                format!("{:e}", k.ci_low),
                format!("{:e}", k.ci_high),
                format!("{:e}", k.z()),
            ]
        })
        .collect();
    let files = vec![csv_file(
        "kurtosis.csv",
        &["t", "excess_kurtosis", "stderr", "ci_low", "ci_high", "z"],
        rows,
    )?];
    Ok(ExperimentOutcome {
        experiment: cfg.experiment,
        verdicts,
        files,
        notes: vec![format!("probe: v at site {}", s.x0)],
    })
}
