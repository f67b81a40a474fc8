//! `pdemap`: simulate data, fit MAP estimates and run the experiment
//! campaigns from a JSON config.

mod commands;
mod config;
mod error;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use config::{
    Loaded, KEYS_CAMPAIGN, KEYS_COMMON, KEYS_DATA, KEYS_ESTIMATOR, KEYS_ORACLE, KEYS_PROPS, KEYS_SIMULATE,
    KEYS_TRUTH,
};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pdemap", version, about = "MAP estimation for PDE coefficient inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// JSON config file.
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set estimator.r=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; overrides the `output` key.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn keys(blocks: &[&str]) -> String {
    let mut s = KEYS_COMMON.to_string();
    for b in blocks {
        s.push('\n');
        s.push_str(b);
    }
    s
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a ground truth and a noisy dataset.
    #[command(after_help = keys(&[KEYS_TRUTH, KEYS_SIMULATE]))]
    Simulate(RunArgs),
    /// Fit the MAP estimate to a dataset, loaded from `data` or simulated from `simulate`.
    #[command(after_help = keys(&[KEYS_DATA, KEYS_TRUTH, KEYS_SIMULATE, KEYS_ESTIMATOR]))]
    Estimate(RunArgs),
    /// Convergence-rate campaign over a ladder of sample sizes.
    #[command(after_help = keys(&[KEYS_TRUTH, KEYS_CAMPAIGN, KEYS_ESTIMATOR]))]
    Rates(RunArgs),
    /// Exceedance frequencies of d_r^2 >= M r_N^2 at one sample size.
    #[command(after_help = keys(&[KEYS_TRUTH, KEYS_CAMPAIGN, KEYS_ESTIMATOR]))]
    Concentration(RunArgs),
    /// Estimation error against the stability bound r_N^tau.
    #[command(after_help = keys(&[KEYS_TRUTH, KEYS_CAMPAIGN, KEYS_ESTIMATOR]))]
    Stability(RunArgs),
    /// Empirical probes of the forward-map regularity conditions.
    #[command(after_help = keys(&[KEYS_PROPS]))]
    Props(RunArgs),
    /// Compare the finite-difference solver with the Feynman-Kac Monte Carlo oracle.
    #[command(name = "oracle-check", after_help = keys(&[KEYS_ORACLE]))]
    OracleCheck(RunArgs),
}

impl Command {
    fn parts(&self) -> (&'static str, &RunArgs, fn(&Loaded, &Path) -> Result<Value, CliError>) {
        match self {
            Command::Simulate(a) => ("simulate", a, commands::simulate),
            Command::Estimate(a) => ("estimate", a, commands::estimate),
            Command::Rates(a) => ("rates", a, commands::rates),
            Command::Concentration(a) => ("concentration", a, commands::concentration),
            Command::Stability(a) => ("stability", a, commands::stability),
            Command::Props(a) => ("props", a, commands::props),
            Command::OracleCheck(a) => ("oracle-check", a, commands::oracle_check),
        }
    }
}

fn write_summary(out: &Path, summary: &Value) -> std::io::Result<()> {
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(summary)? + "\n")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args, run) = cli.command.parts();

    let loaded = match config::load(&args.config, &args.set) {
        Ok(l) => l,
        Err(e) => return fail(name, args.out.as_deref(), &e),
    };
    let out = args.out.clone().unwrap_or_else(|| loaded.config.output.clone());
    if let Err(e) = std::fs::create_dir_all(&out) {
        return fail(name, None, &CliError::Io(e));
    }
    match run(&loaded, &out) {
        Ok(mut summary) => {
            summary["status"] = json!("ok");
            summary["command"] = json!(name);
            summary["seed"] = json!(loaded.config.seed);
            if let Err(e) = write_summary(&out, &summary) {
                return fail(name, None, &CliError::Io(e));
            }
            // a closed stdout must not turn a finished run into a failure
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => fail(name, Some(&out), &e),
    }
}

fn fail(name: &str, out: Option<&Path>, e: &CliError) -> ExitCode {
    let mut report = e.report();
    report["command"] = json!(name);
    if let Some(out) = out {
        // best effort: the error is also printed below
        let _ = std::fs::create_dir_all(out).and_then(|_| write_summary(out, &report));
    }
    eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
    ExitCode::from(e.exit_code())
}
