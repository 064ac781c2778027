use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use massmc_cli::config::{ExperimentConfig, SamplerName};
use massmc_cli::replicate::{parse_seeds, render, replicate, ReplicateOptions, Table};
use massmc_cli::{check, experiment, CliError};

#[derive(Parser)]
#[command(name = "massmc", version, about = "Adaptive-mass HMC samplers with Monte Carlo EM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write trace.csv, summary.json and config-echo.json.
    Run(ConfigArgs),
    /// Run the diagnostics suite and report pass/fail per property.
    Check(ConfigArgs),
    /// Replicate the 1-D Gaussian comparison table over several seeds.
    ReplicateTable1(ReplicateArgs),
    /// Replicate the Bayesian logistic regression table, sweeping step sizes.
    ReplicateTable2(ReplicateArgs),
}

#[derive(Args)]
struct ReplicateArgs {
    /// Comma-separated seeds; at least three.
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    /// Directory for report.json and the per-run subdirectories.
    #[arg(long, default_value = "replicate-out")]
    out: PathBuf,
    /// Restrict to these samplers (comma-separated).
    #[arg(long, value_delimiter = ',')]
    sampler: Vec<String>,
    /// Number of runs executed concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    /// Config overrides applied to every run, as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; every key can also be given as `--key value`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn pairs(raw: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(key) = it.next() {
        let Some(name) = key.strip_prefix("--") else {
            return Err(CliError::Validation(format!("expected --key, found {key:?}")));
        };
        if let Some((k, v)) = name.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let value = it.next().ok_or_else(|| CliError::Validation(format!("missing value for --{name}")))?;
        out.push((name.to_string(), value.clone()));
    }
    Ok(out)
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let overrides = pairs(&args.overrides)?;
    match &args.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => ExperimentConfig::from_toml_str("", &overrides),
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = load(&args)?;
            experiment::run(&cfg)?;
            println!("{}", cfg.output_dir.join("summary.json").display());
            Ok(())
        }
        Command::Check(args) => {
            check::check(&load(&args)?)?;
            Ok(())
        }
        Command::ReplicateTable1(args) => run_replicate(Table::Gaussian, args),
        Command::ReplicateTable2(args) => run_replicate(Table::Logistic, args),
    }
}

fn run_replicate(table: Table, args: ReplicateArgs) -> Result<(), CliError> {
    let opts = ReplicateOptions {
        seeds: parse_seeds(&args.seeds)?,
        out: args.out,
        samplers: args.sampler.iter().map(|s| SamplerName::parse(s)).collect::<Result<_, _>>()?,
        jobs: args.jobs,
        overrides: pairs(&args.overrides)?,
    };
    let report = replicate(table, &opts)?;
    print!("{}", render(&report));
    println!("{}", opts.out.join("report.json").display());
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
