use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use restrict_lab::harness::{exit_code, outcome_code, run, ExperimentConfig, Kind};
use restrict_lab::Error;

/// Runs one restrict-lab experiment and writes summary.json (plus sweep.csv
/// for sweeps) into the output directory.
///
/// Exit status: 0 success, 2 configuration error, 3 budget exceeded,
/// 4 an acceptance assertion in the config failed, 1 anything else.
#[derive(Parser, Debug)]
#[command(name = "lab", version)]
struct Args {
    /// bl-check, bl-alpha, blreg-estimate, ensemble-verify, cover-audit,
    /// slice-audit, restriction-scaling or kakeya-sweep
    kind: String,
    /// JSON configuration file
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's output_path, else ./out)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("lab: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn execute(args: &Args) -> Result<i32, Error> {
    let kind: Kind = args.kind.parse()?;
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = ExperimentConfig::from_json_for(&text, kind)?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_path.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let outcome = run(&cfg, &out)?;
    let status = if outcome.passed { "passed" } else { "FAILED" };
    println!("{kind}: {status}; wrote {}", out.join("summary.json").display());
    if outcome.csv.is_some() {
        println!("{kind}: wrote {}", out.join("sweep.csv").display());
    }
    Ok(outcome_code(&outcome))
}
