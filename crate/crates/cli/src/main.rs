//! `vcomp`: generate data, fit variance components, run verification
//! experiments.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use vcomp_core::mcverify::{run_experiment, Executor};
use vcomp_core::randsrc::SeedSpec;
use vcomp_core::remodel::{gen_coupled, gen_design, gen_independent};
use vcomp_core::spectral::decompose_gram;
use vcomp_core::vcest::{fit_mle, ScoreState};
use vcomp_core::{matio, Error};

use config::RunConfig;

const SEED_ENV: &str = "VCOMP_SEED";

#[derive(Parser, Debug)]
#[command(name = "vcomp", version, about = "Variance-components estimation and Monte Carlo checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config and VCOMP_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Draw a design and response from the random-effects model.
    Generate,
    /// Maximum-likelihood fit of (σ², η²) to X and y.
    Fit,
    /// Run a Monte Carlo verification experiment.
    Experiment,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Fit => "fit",
            Command::Experiment => "experiment",
        }
    }
}

/// Failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(e) if e.is_statistical_flag() => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum SeedSource {
    Flag,
    Config,
    Env,
    Plan,
    Default,
}

fn resolve_seed(flag: Option<u64>, config: Option<u64>, plan: Option<u64>) -> Result<(u64, SeedSource)> {
    if let Some(s) = flag {
        return Ok((s, SeedSource::Flag));
    }
    if let Some(s) = config {
        return Ok((s, SeedSource::Config));
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        let s = v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not a u64"))?;
        return Ok((s, SeedSource::Env));
    }
    Ok(match plan {
        Some(s) => (s, SeedSource::Plan),
        None => (0, SeedSource::Default),
    })
}

#[derive(Serialize)]
struct Versions {
    vcomp: &'static str,
    vcomp_core: &'static str,
}

#[derive(Serialize)]
struct OutputFile {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: &'static str,
    config_hash: String,
    seed: u64,
    seed_source: SeedSource,
    workers: usize,
    versions: Versions,
    runtime_secs: f64,
    status: &'static str,
    outputs: Vec<OutputFile>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the effective configuration: the command's section with the
/// resolved seed, excluding worker count and output location.
fn config_hash<T: Serialize>(command: Command, section: &T, seed: u64) -> Result<String> {
    let v = serde_json::json!({ "command": command.name(), "seed": seed, "section": section });
    Ok(sha256_hex(serde_json::to_string(&v)?.as_bytes()))
}

struct Run {
    command: Command,
    config_hash: String,
    seed: u64,
    seed_source: SeedSource,
    workers: usize,
    outputs: Vec<&'static str>,
    status: &'static str,
}

fn write_manifest(out: &Path, run: &Run, started: Instant) -> Result<()> {
    let mut outputs = Vec::with_capacity(run.outputs.len());
    for name in &run.outputs {
        let bytes = fs::read(out.join(name)).with_context(|| format!("cannot read back {name}"))?;
        outputs.push(OutputFile { path: (*name).to_string(), sha256: sha256_hex(&bytes) });
    }
    let manifest = Manifest {
        command: run.command.name(),
        config_hash: run.config_hash.clone(),
        seed: run.seed,
        seed_source: run.seed_source,
        workers: run.workers,
        versions: Versions { vcomp: env!("CARGO_PKG_VERSION"), vcomp_core: vcomp_core::VERSION },
        runtime_secs: started.elapsed().as_secs_f64(),
        status: run.status,
        outputs,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(path) => RunConfig::load(path),
        None => bail!("--config is required"),
    }
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."))
}

fn cmd_generate(cli: &Cli, cfg: &RunConfig, out: &Path) -> Result<Run> {
    let g = RunConfig::section(&cfg.generate, "generate")?;
    let (seed, seed_source) = resolve_seed(cli.seed, cfg.seed, None)?;
    let x = gen_design(g.n, g.p, &g.design, SeedSpec::new(seed, 0))?;
    let draw_seed = SeedSpec::new(seed, 1);
    let data = match g.coupling {
        Some(scheme) => gen_coupled(&x, g.params, g.beta_law, g.eps_law, scheme, draw_seed)?,
        None => gen_independent(&x, g.params, g.beta_law, g.eps_law, draw_seed)?,
    };
    data.save_dir(out)?;
    Ok(Run {
        command: Command::Generate,
        config_hash: config_hash(Command::Generate, g, seed)?,
        seed,
        seed_source,
        workers: 1,
        outputs: vec!["X.csv", "y.csv", "truth.json"],
        status: "ok",
    })
}

fn cmd_fit(cli: &Cli, cfg: &RunConfig, out: &Path) -> Result<Run> {
    let f = RunConfig::section(&cfg.fit, "fit")?;
    let (seed, seed_source) = resolve_seed(cli.seed, cfg.seed, None)?;
    let x = matio::load_matrix(&f.x).with_context(|| format!("cannot load X from {}", f.x.display()))?;
    let y = matio::load_vector(&f.y).with_context(|| format!("cannot load y from {}", f.y.display()))?;
    let spec = decompose_gram(&x)?;
    let state = ScoreState::new(&spec, &y)?;
    let mut opts = f.options;
    opts.keep_trace = f.with_trace;
    let fit = fit_mle(&state, &opts)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("fit.json"), fit.to_json(f.with_trace)?)?;
    let status = if fit.identifiability_flag {
        eprintln!("warning: spectrum too flat to identify η²; fit flagged");
        "not_identifiable"
    } else {
        "ok"
    };
    Ok(Run {
        command: Command::Fit,
        config_hash: config_hash(Command::Fit, f, seed)?,
        seed,
        seed_source,
        workers: 1,
        outputs: vec!["fit.json"],
        status,
    })
}

fn cmd_experiment(cli: &Cli, cfg: &RunConfig, out: &Path) -> Result<Run> {
    let mut plan = RunConfig::section(&cfg.experiment, "experiment")?.clone();
    let (seed, seed_source) = resolve_seed(cli.seed, cfg.seed, Some(plan.master_seed))?;
    plan.master_seed = seed;
    let exec = Executor::new(cli.workers.or(cfg.workers).unwrap_or(0))?;
    let report = run_experiment(&plan, &exec)?;
    report.write(out)?;
    eprintln!(
        "{}: {} ({} of {} gates passed)",
        plan.kind.name(),
        if report.passed { "passed" } else { "FAILED" },
        report.gates.iter().filter(|g| g.pass).count(),
        report.gates.len()
    );
    Ok(Run {
        command: Command::Experiment,
        config_hash: config_hash(Command::Experiment, &plan, seed)?,
        seed,
        seed_source,
        workers: exec.workers(),
        outputs: vec!["report.json", "cells.csv"],
        status: if report.passed { "passed" } else { "gates_failed" },
    })
}

fn run(cli: &Cli) -> std::result::Result<(), Failure> {
    let started = Instant::now();
    let cfg = load_config(cli)?;
    let out = out_dir(cli, &cfg);
    let run = match cli.command {
        Command::Generate => cmd_generate(cli, &cfg, &out),
        Command::Fit => cmd_fit(cli, &cfg, &out),
        Command::Experiment => cmd_experiment(cli, &cfg, &out),
    }?;
    write_manifest(&out, &run, started)?;
    if run.status == "not_identifiable" {
        return Err(Failure { code: 2, error: anyhow::anyhow!("η² not identifiable from this design") });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
