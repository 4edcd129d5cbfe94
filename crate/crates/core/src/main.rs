use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rcmlab::environment::ConductanceLaw;
use rcmlab::error::Error;
use rcmlab::experiments::{run_to_dir, Experiment, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "rcmlab",
    version,
    about = "Principal Dirichlet eigenpairs of random conductance models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenvalue, min pi and solver statistics.
    Spectrum(Flags),
    /// Eigenvector concentration at the minimal-speed site.
    Localization(Flags),
    /// Slope of log median lambda1 against log n.
    Scaling(Flags),
    /// Rescaled eigenvalues against the limiting distribution.
    LimitLaw(Flags),
    /// Trap counts, Lambda_g and Borel-Cantelli tails.
    Traps(Flags),
    /// Giant cluster density and hole maps.
    Percolation(Flags),
    /// Detour-path certificates of the Dirichlet-form lower bound.
    Paths(Flags),
}

#[derive(Args, Clone, Debug)]
struct Flags {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    /// Conductance law: `constant:C`, `polynomial:GAMMA`, or JSON.
    #[arg(long)]
    law: Option<String>,
    /// Box radius; repeat for a grid.
    #[arg(long = "n")]
    n: Vec<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    xi: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    p: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    epsilon: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    epsilon1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    delta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    nu_quantile: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    tol: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_law(s: &str) -> Result<ConductanceLaw, Error> {
    let bad = || Error::Config(format!("cannot parse law {s:?}"));
    if s.trim_start().starts_with('{') {
        return serde_json::from_str(s).map_err(|e| Error::Config(format!("bad law: {e}")));
    }
    let (kind, val) = s.split_once(':').ok_or_else(bad)?;
    let v: f64 = val.parse().map_err(|_| bad())?;
    match kind {
        "constant" => Ok(ConductanceLaw::constant(v)),
        "polynomial" => Ok(ConductanceLaw::polynomial(v)),
        _ => Err(bad()),
    }
}

fn build_config(exp: Experiment, f: &Flags) -> Result<ExperimentConfig, Error> {
    let mut c = match &f.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let mut c = ExperimentConfig::from_json(&text)?;
            c.experiment = exp;
            c
        }
        None => ExperimentConfig::new(exp),
    };
    if let Some(v) = f.dim {
        c.d = v;
    }
    if let Some(v) = f.gamma {
        c.gamma = Some(v);
        c.law = None;
    }
    if let Some(s) = &f.law {
        c.law = Some(parse_law(s)?);
    }
    if !f.n.is_empty() {
        c.n_grid = f.n.clone();
    }
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = f.$field { c.$field = v; } )* };
    }
    macro_rules! set_opt {
        ($($field:ident),*) => { $( if f.$field.is_some() { c.$field = f.$field; } )* };
    }
    set!(seeds, seed_base, tol, nu_quantile);
    set_opt!(xi, p, epsilon, epsilon1, delta, threads);
    if let Some(o) = &f.out {
        c.out = Some(o.clone());
    }
    Ok(c)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (exp, flags) = match &cli.command {
        Command::Spectrum(f) => (Experiment::Spectrum, f),
        Command::Localization(f) => (Experiment::Localization, f),
        Command::Scaling(f) => (Experiment::Scaling, f),
        Command::LimitLaw(f) => (Experiment::LimitLaw, f),
        Command::Traps(f) => (Experiment::Traps, f),
        Command::Percolation(f) => (Experiment::Percolation, f),
        Command::Paths(f) => (Experiment::Paths, f),
    };
    let result = build_config(exp, flags).and_then(|c| {
        c.validate()?;
        let dir = c
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("results").join(exp.name()));
        let out = run_to_dir(&c, &dir)?;
        Ok((dir, out))
    });
    match result {
        Ok((dir, out)) => {
            let failed = out.runs.iter().filter(|r| r.record.status != "ok").count();
            println!(
                "{}: {} runs ({} not ok), config {} -> {}",
                exp.name(),
                out.runs.len(),
                failed,
                out.config_hash,
                dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e @ (Error::Io(_) | Error::Csv(_) | Error::Json(_))) => {
            eprintln!("{e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}
