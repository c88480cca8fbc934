mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use phonon_kinetics::experiments::{DataFile, ModelSource};
use phonon_kinetics::{
    diff_tables, run_experiment, validate_conditions, validate_profile, ConditionTolerances,
    DispersionTable, EstimateTable, ExperimentConfig, ForceField,
};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use config::Layers;

#[derive(Parser)]
#[command(name = "phonon-kinetics", version, about = "Reproducible kinetic-limit experiments on harmonic lattices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its data files and manifest.
    Run(RunArgs),
    /// Compare an empirical table with a theory table entry by entry.
    Diff(DiffArgs),
    /// Check the structural conditions of a force field.
    ValidateModel(ModelArgs),
    /// Check the regularity conditions of a slow profile.
    ValidateProfile(ProfileArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment name; may instead come from the config file.
    experiment: Option<String>,
    /// JSON config; fields not given keep the experiment's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field by JSON path, e.g. `model.side=1024` (repeatable).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory; defaults to `runs/<experiment>-<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiffArgs {
    empirical: PathBuf,
    theory: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    sigma: f64,
    /// Write the full comparison as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Force-field JSON, or a model source such as `{"kind": "nearest_neighbor", ...}`.
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Side of the θ grid used for the checks.
    #[arg(long, default_value_t = 64)]
    theta_side: usize,
    /// Number of positions along the box diagonal.
    #[arg(long, default_value_t = 16)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self, out: Option<PathBuf>) -> Result<ExperimentConfig> {
        Layers {
            experiment: self.experiment.clone(),
            config: self.config.clone(),
            set: self.set.clone(),
            seed: self.seed,
            out,
            threads: self.threads,
        }
        .resolve()
    }
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn install_threads(threads: Option<usize>) -> Result<()> {
    if let Some(k) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

/// Digest over the file list: identical data files give an identical run digest.
fn run_digest(files: &[DataFile]) -> String {
    let mut h = Sha256::new();
    for f in files {
        h.update(f.name.as_bytes());
        h.update([0]);
        h.update(sha256(&f.bytes).as_bytes());
        h.update([b'\n']);
    }
    hex::encode(h.finalize())
}

fn run(args: &RunArgs) -> Result<ExitCode> {
    let cfg = args.cfg.resolve(args.out.clone())?;
    install_threads(cfg.threads)?;
    let dir = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", cfg.experiment.as_str(), cfg.seed)));

    let clock = Instant::now();
    let outcome = run_experiment(&cfg)?;
    let wall = clock.elapsed().as_secs_f64();

    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut listed = Vec::new();
    for f in &outcome.files {
        let path = dir.join(&f.name);
        std::fs::write(&path, &f.bytes).with_context(|| format!("writing {}", path.display()))?;
        listed.push(json!({"name": f.name, "bytes": f.bytes.len(), "sha256": sha256(&f.bytes)}));
    }
    let manifest = json!({
        "experiment": cfg.experiment.as_str(),
        "passed": outcome.passed(),
        "config": cfg,
        "versions": {
            "phonon-kinetics": phonon_kinetics::VERSION,
            "phonon-kinetics-cli": env!("CARGO_PKG_VERSION"),
        },
        "threads": rayon::current_num_threads(),
        "wall_time_s": wall,
        "verdicts": outcome.verdicts,
        "notes": outcome.notes,
        "files": listed,
        "digest": run_digest(&outcome.files),
    });
    write_json(&dir.join("manifest.json"), &manifest)?;

    for v in &outcome.verdicts {
        println!(
            "{} {}: {:.4e} (threshold {:.4e}) {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.value,
            v.threshold,
            v.detail
        );
    }
    println!("wrote {} files to {} in {wall:.1} s", outcome.files.len() + 1, dir.display());
    Ok(if outcome.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn diff(args: &DiffArgs) -> Result<ExitCode> {
    let emp = EstimateTable::load(&args.empirical).with_context(|| format!("reading {}", args.empirical.display()))?;
    let th = EstimateTable::load(&args.theory).with_context(|| format!("reading {}", args.theory.display()))?;
    let rep = diff_tables(&emp, &th, args.sigma)?;
    for e in &rep.beyond {
        println!("beyond {}: index {} block {} ({}, {}) z = {:.2}", rep.sigma, e.index, e.block, e.row, e.col, e.z);
    }
    println!(
        "{} {} entries, {} beyond {} sigma (fraction {:.3e}, allowed < {:.3e}), max z {:.2}",
        if rep.pass { "PASS" } else { "FAIL" },
        rep.entries,
        rep.beyond.len(),
        rep.sigma,
        rep.fraction_beyond,
        2.0 * rep.expected_rate,
        rep.max_z
    );
    if let Some(out) = &args.out {
        write_json(out, &serde_json::to_value(&rep)?)?;
    }
    Ok(if rep.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn load_model(path: &Path) -> Result<ForceField> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if value.get("kind").is_some() {
        let source: ModelSource = serde_json::from_value(value).context("invalid model source")?;
        return Ok(source.load()?);
    }
    Ok(ForceField::from_json(&text)?)
}

fn validate_model(args: &ModelArgs) -> Result<ExitCode> {
    let field = load_model(&args.model)?;
    // an odd field has no real band structure; the report then covers the table-free checks
    let table = DispersionTable::build(&field, None).ok();
    let report = validate_conditions(&field, table.as_ref(), &ConditionTolerances::default());
    let value = serde_json::to_value(&report)?;
    match &args.out {
        Some(out) => write_json(out, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    for r in &report.records {
        eprintln!("{} {:?} {}", r.condition, r.status, r.note);
    }
    Ok(if report.is_valid() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn validate_profile_cmd(args: &ProfileArgs) -> Result<ExitCode> {
    let cfg = args.cfg.resolve(None)?;
    let Some(spec) = &cfg.profile else {
        bail!("{} has no profile; set one in the config", cfg.experiment.as_str());
    };
    if args.points == 0 {
        bail!("--points must be positive");
    }
    let field = std::sync::Arc::new(cfg.model.load()?);
    let dim = field.lattice().dim;
    let profile = spec.build(field)?;
    let rs: Vec<Vec<f64>> = (0..args.points)
        .map(|i| vec![cfg.box_length * i as f64 / args.points as f64; dim])
        .collect();
    let report = validate_profile(profile.as_ref(), &rs, args.theta_side)?;
    let value = serde_json::to_value(&report)?;
    match &args.out {
        Some(out) => write_json(out, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    Ok(if report.all_pass() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(a),
        Command::Diff(a) => diff(a),
        Command::ValidateModel(a) => validate_model(a),
        Command::ValidateProfile(a) => validate_profile_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
