use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use phase_infer::harness::{
    coverage_csv, coverage_table, histogram_table, histograms_csv, summarize, table1_csv,
    ExperimentConfig, InstanceFile, Study,
};
use phase_infer::inference::{coordinate_ci, simultaneous_max_ci, swap_estimate};
use phase_infer::model::{mix_seed, seeded_rng, Instance};
use phase_infer::twf::{run_twf, TwfTuning};
use phase_infer::{Error, Result};

#[derive(Parser)]
#[command(name = "phase-infer", version, about = "Sparse phase retrieval and debiased inference")]
struct Cli {
    /// Experiment config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `master_seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads for experiments (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one `2n`-row instance from the config and write instance.json.
    Simulate,
    /// Fit TWF to an instance file and write the estimate.
    Solve {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Split-and-swap debiasing with confidence intervals for every coordinate.
    Infer {
        /// Instance file; when absent an instance is simulated from the config.
        #[arg(long)]
        instance: Option<PathBuf>,
        /// Confidence level is `1 - alpha`; defaults to the config value or 0.05.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Monte-Carlo run from a config file.
    Experiment {
        #[arg(value_enum)]
        kind: ExperimentKind,
        /// Bins per histogram.
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExperimentKind {
    Table1,
    Table2,
    Histograms,
}

fn load_config(cli: &Cli) -> Result<Option<ExperimentConfig>> {
    let Some(path) = &cli.config else {
        return Ok(None);
    };
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    cfg.validate()?;
    Ok(Some(cfg))
}

fn require_config(cli: &Cli) -> Result<ExperimentConfig> {
    load_config(cli)?.ok_or_else(|| Error::Config("this command needs --config".into()))
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn simulate(cli: &Cli) -> Result<()> {
    let cfg = require_config(cli)?;
    let study = Study::new(cfg)?;
    let inst = study.instance(0)?;
    std::fs::create_dir_all(&cli.out)?;
    InstanceFile::write(&inst, &cli.out.join("instance.json"))
}

fn solve(cli: &Cli, instance: &Path) -> Result<()> {
    let tuning = load_config(cli)?.map(|c| c.tuning).unwrap_or_default();
    let inst = InstanceFile::read(instance)?;
    let fit = run_twf(&inst, &tuning)?;
    match cli.format {
        Format::Json => write_out(&cli.out, "estimate.json", &to_json(&fit)?),
        Format::Csv => {
            let mut s = String::from("k,beta_tilde\n");
            for (k, v) in fit.beta_tilde.values().iter().enumerate() {
                let _ = writeln!(s, "{k},{v}");
            }
            write_out(&cli.out, "estimate.csv", &s)
        }
    }
}

#[derive(Serialize)]
struct CoordinateRow {
    k: usize,
    beta_hat1: f64,
    beta_hat2: f64,
    beta_swap: f64,
    tau1_sq: f64,
    tau2_sq: f64,
    a: f64,
    ci_lo: f64,
    ci_hi: f64,
}

#[derive(Serialize)]
struct InferenceReport {
    alpha: f64,
    sigma: f64,
    n_half: usize,
    s_hat: usize,
    simultaneous_halfwidth: f64,
    coordinates: Vec<CoordinateRow>,
}

fn infer(cli: &Cli, instance: Option<&Path>, alpha: Option<f64>) -> Result<()> {
    let cfg = load_config(cli)?;
    let seed = cli.seed.or(cfg.as_ref().map(|c| c.master_seed)).unwrap_or(0);
    let (inst, tuning, sigma): (Instance, TwfTuning, Option<f64>) = match (instance, &cfg) {
        (Some(path), _) => {
            let inst = InstanceFile::read(path)?;
            let sigma = inst.sigma;
            (inst, cfg.as_ref().map(|c| c.tuning).unwrap_or_default(), sigma)
        }
        (None, Some(cfg)) => {
            let study = Study::new(cfg.clone())?;
            (study.instance(0)?, cfg.tuning, Some(study.sigma))
        }
        (None, None) => return Err(Error::Config("infer needs --instance or --config".into())),
    };
    let alpha = alpha.or(cfg.as_ref().map(|c| c.alpha)).unwrap_or(0.05);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }

    let mut rng = seeded_rng(mix_seed(seed, 1));
    let fit = swap_estimate(&inst, &tuning, sigma, &mut rng)?;
    let est = &fit.estimate;
    let coordinates = (0..est.p())
        .map(|k| {
            let ci = coordinate_ci(est, k, alpha)?;
            Ok(CoordinateRow {
                k,
                beta_hat1: est.beta_hat1[k],
                beta_hat2: est.beta_hat2[k],
                beta_swap: est.beta_swap[k],
                tau1_sq: est.tau1_sq[k],
                tau2_sq: est.tau2_sq[k],
                a: est.a[k],
                ci_lo: ci.lo,
                ci_hi: ci.hi,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = InferenceReport {
        alpha,
        sigma: est.sigma,
        n_half: est.n_half,
        s_hat: est.s_hat,
        simultaneous_halfwidth: simultaneous_max_ci(est, alpha)?,
        coordinates,
    };

    match cli.format {
        Format::Json => write_out(&cli.out, "inference.json", &to_json(&report)?),
        Format::Csv => {
            let mut s = String::from("k,beta_hat1,beta_hat2,beta_swap,tau1_sq,tau2_sq,a,ci_lo,ci_hi\n");
            for r in &report.coordinates {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    r.k, r.beta_hat1, r.beta_hat2, r.beta_swap, r.tau1_sq, r.tau2_sq, r.a, r.ci_lo, r.ci_hi
                );
            }
            write_out(&cli.out, "inference.csv", &s)
        }
    }
}

fn experiment(cli: &Cli, kind: ExperimentKind, bins: usize) -> Result<()> {
    let cfg = require_config(cli)?;
    let study = Study::new(cfg)?;
    let full_twf = kind != ExperimentKind::Table2;
    let records = study.run_all(cli.threads, full_twf)?;
    let json = cli.format == Format::Json;
    match kind {
        ExperimentKind::Table1 => {
            let table = summarize(&records, &study.tracked)?;
            if json {
                write_out(&cli.out, "table1.json", &to_json(&table.rows)?)
            } else {
                write_out(&cli.out, "table1.csv", &table1_csv(&table))
            }
        }
        ExperimentKind::Table2 => {
            let rows = coverage_table(&records, &study.tracked, study.cfg.alpha)?;
            if json {
                write_out(&cli.out, "coverage.json", &to_json(&rows)?)
            } else {
                write_out(&cli.out, "coverage.csv", &coverage_csv(&rows))
            }
        }
        ExperimentKind::Histograms => {
            let rows = histogram_table(&records, &study.tracked, bins)?;
            if json {
                write_out(&cli.out, "histograms.json", &to_json(&rows)?)
            } else {
                write_out(&cli.out, "histograms.csv", &histograms_csv(&rows))
            }
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate => simulate(cli),
        Command::Solve { instance } => solve(cli, instance),
        Command::Infer { instance, alpha } => infer(cli, instance.as_deref(), *alpha),
        Command::Experiment { kind, bins } => experiment(cli, *kind, *bins),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
