//! Command-line front end: run an optimization, re-analyze a stored design
//! raster against the reference mesh, or compare the adaptive and uniform
//! modes in one invocation. Failures exit nonzero with a single JSON error
//! line on stderr.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mto::config::{Config, RunMode};
use mto::design::BackgroundGrid;
use mto::driver::{export_report, reference_objective, run};
use mto::export::read_design_pgm;

#[derive(Parser)]
#[command(name = "mto", version, about = "dp-adaptive multiresolution topology optimization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured optimization and write its artifacts.
    Solve(SolveArgs),
    /// Re-analyze a design raster on the reference mesh.
    Verify(VerifyArgs),
    /// Run uniform baseline and adaptive back to back and report the
    /// comparison.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Adaptive,
    Baseline,
}

#[derive(Args)]
struct SolveArgs {
    /// Configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured run mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Scale the mesh resolution (0.5 halves both axes).
    #[arg(long)]
    scale: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "mto-out")]
    out: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Design raster to re-analyze.
    #[arg(long)]
    design: PathBuf,
    /// Configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Objective the design was optimized to; enables the accuracy ratio.
    #[arg(long)]
    objective: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    /// Configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Scale the mesh resolution for both runs.
    #[arg(long)]
    scale: Option<f64>,
    /// Output directory; each mode writes into its own subdirectory.
    #[arg(long, default_value = "mto-out")]
    out: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Solve(args) => solve(args),
        Cmd::Verify(args) => verify(args),
        Cmd::Compare(args) => compare(args),
    };
    if let Err(err) = result {
        eprintln!("{}", serde_json::json!({ "error": format!("{err:#}") }));
        std::process::exit(1);
    }
}

fn load_config(path: &Path, scale: Option<f64>, seed: Option<u64>) -> Result<Config> {
    let mut config =
        Config::from_path(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(factor) = scale {
        config = config.scaled(factor)?;
    }
    Ok(config)
}

fn solve(args: SolveArgs) -> Result<()> {
    let mut config = load_config(&args.config, args.scale, args.seed)?;
    if let Some(mode) = args.mode {
        config.mode = match mode {
            ModeArg::Adaptive => RunMode::Adaptive,
            ModeArg::Baseline => RunMode::UniformBaseline,
        };
    }
    let report = run(&config)?;
    let reference = reference_objective(&report.final_grid, &config)?;
    let summary = report.summary(None, Some(reference));
    export_report(&report, &summary, &args.out)?;
    println!(
        "final_objective={} reference_objective={} accuracy_ratio={} wall_seconds={} out={}",
        report.final_objective,
        reference,
        report.final_objective / reference,
        report.wall_seconds,
        args.out.display()
    );
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<()> {
    let config = load_config(&args.config, None, None)?;
    let (ncx, ncy, values) = read_design_pgm(&args.design)?;
    let width = config.domain_width();
    let height = config.problem.length;
    let sx = width / ncx as f64;
    let sy = height / ncy as f64;
    if ((sx - sy) / sx).abs() > 1e-9 {
        bail!(
            "raster {ncx} x {ncy} does not tile the {width} x {height} domain with square cells"
        );
    }
    let grid = BackgroundGrid {
        ncx,
        ncy,
        cell_size: sx,
        values,
    };
    let jstar = reference_objective(&grid, &config)?;
    match args.objective {
        Some(j) => println!("jstar={jstar} ratio={}", j / jstar),
        None => println!("jstar={jstar}"),
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let config = load_config(&args.config, args.scale, args.seed)?;
    let mut baseline_config = config.clone();
    baseline_config.mode = RunMode::UniformBaseline;
    let mut adaptive_config = config;
    adaptive_config.mode = RunMode::Adaptive;

    let baseline = run(&baseline_config)?;
    let adaptive = run(&adaptive_config)?;
    let reference = reference_objective(&adaptive.final_grid, &adaptive_config)?;

    let baseline_summary = baseline.summary(None, None);
    let adaptive_summary = adaptive.summary(Some(baseline.final_objective), Some(reference));
    export_report(&baseline, &baseline_summary, &args.out.join("baseline"))?;
    export_report(&adaptive, &adaptive_summary, &args.out.join("adaptive"))?;

    let speedup = baseline.wall_seconds / adaptive.wall_seconds;
    let comparison = serde_json::json!({
        "baseline_objective": baseline.final_objective,
        "adaptive_objective": adaptive.final_objective,
        "objective_ratio": adaptive.final_objective / baseline.final_objective,
        "accuracy_ratio": adaptive.final_objective / reference,
        "baseline_wall_seconds": baseline.wall_seconds,
        "adaptive_wall_seconds": adaptive.wall_seconds,
        "speedup": speedup,
    });
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("comparison.json"),
        format!("{}\n", serde_json::to_string_pretty(&comparison)?),
    )?;
    println!(
        "speedup={speedup} objective_ratio={} out={}",
        adaptive.final_objective / baseline.final_objective,
        args.out.display()
    );
    Ok(())
}
