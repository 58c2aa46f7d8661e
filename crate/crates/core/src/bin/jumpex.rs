use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use jumpex::harness_cli::{self, Experiment, ExperimentConfig, Formats, Overrides, ENV_THREADS};

/// Runs one experiment and writes its report.
#[derive(Debug, Parser)]
#[command(name = "jumpex", version, about)]
struct Cli {
    #[arg(value_enum)]
    experiment: Experiment,
    /// TOML or JSON config (chosen by extension).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory; also `JUMPEX_OUT`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write only the JSON report.
    #[arg(long, conflicts_with = "csv")]
    json: bool,
    /// Write only the CSV report.
    #[arg(long)]
    csv: bool,
}

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(ENV_THREADS) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: cannot set thread count: {e}");
                    return ExitCode::from(EXIT_RUNTIME);
                }
            }
            _ => {
                eprintln!("error: {ENV_THREADS} must be a positive integer, got '{v}'");
                return ExitCode::from(EXIT_CONFIG);
            }
        }
    }
    let overrides = Overrides {
        seed: cli.seed,
        paths: cli.paths,
        steps: cli.steps,
        out: cli.out,
    };
    let config = match ExperimentConfig::load(&cli.config, cli.experiment, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let report = match harness_cli::run(&config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {} failed: {e}", cli.experiment.name());
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    let formats = match (cli.json, cli.csv) {
        (true, false) => Formats { json: true, csv: false },
        (false, true) => Formats { json: false, csv: true },
        _ => Formats::BOTH,
    };
    let dir = match harness_cli::write_report(&report, &config.out, formats) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: writing report: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    print!("{}", report.summary());
    println!("report: {}", dir.display());
    if report.pass {
        ExitCode::SUCCESS
    } else {
        for r in report.failing_rows() {
            eprintln!("FAIL: {}", r.name);
        }
        ExitCode::from(EXIT_FAIL)
    }
}
