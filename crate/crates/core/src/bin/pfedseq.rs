//! Command-line front end.
//!
//! Exit codes: 0 success, 1 config error, 2 numeric or gradcheck failure,
//! 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pfedseq::harness::{compare, gradcheck, run_experiment, write_comparison, ExperimentConfig, GradcheckOptions, Suite};
use pfedseq::synthdata::{build_federated_dataset, DataConfig};
use pfedseq::Error;

#[derive(Parser)]
#[command(name = "pfedseq", version, about = "Personalized federated adapter tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a federated dataset from a TOML data spec.
    GenData { spec: PathBuf, out: PathBuf },
    /// Run one experiment per seed and write metrics CSVs.
    Run { config: PathBuf },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// Suites to run; all when omitted.
        #[arg(long = "suite", value_enum)]
        suites: Vec<Suite>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run several configs over a shared seed set and summarize them.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
        /// Where summary.csv and curves.csv go.
        #[arg(long, default_value = "runs/compare")]
        out: PathBuf,
    },
}

enum Failure {
    Lib(Error),
    Gradcheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Comparison(_) | Error::Parameter(_) => 1,
        Error::Io(_) | Error::Format(_) => 3,
        _ => 2,
    }
}

fn read_text(path: &PathBuf) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData { spec, out } => {
            let cfg: DataConfig = toml::from_str(&read_text(&spec)?).map_err(|e| Error::Config {
                field: spec.display().to_string(),
                reason: e.message().to_string(),
            })?;
            let ds = build_federated_dataset(&cfg)?;
            ds.write(&out)?;
            let n: usize = ds.clients.iter().map(|c| c.train.len() + c.test.len()).sum();
            println!("wrote {} clients, {n} samples to {}", ds.clients.len(), out.display());
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            for seed in cfg.seed_set() {
                let out = run_experiment(&cfg.with_seed(seed))?;
                println!(
                    "{} seed {seed}: final test accuracy {:.4} -> {}",
                    cfg.label(),
                    out.final_test_accuracy,
                    out.metrics_path.display()
                );
            }
        }
        Command::Gradcheck { suites, instances, seed } => {
            let report = gradcheck(
                &suites,
                &GradcheckOptions {
                    instances,
                    seed,
                    fault: None,
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if !report.pass {
                return Err(Failure::Gradcheck);
            }
        }
        Command::Compare { configs, out } => {
            let cfgs = configs
                .iter()
                .map(|p| ExperimentConfig::load(p))
                .collect::<Result<Vec<_>, _>>()?;
            let cmp = compare(&cfgs, true)?;
            for row in &cmp.summary {
                println!(
                    "{:<24} final {:.4} ± {:.4} over {} seeds",
                    row.label, row.mean_final_accuracy, row.std_final_accuracy, row.seeds
                );
            }
            let (summary, curves) = write_comparison(&cmp, &out)?;
            println!("wrote {} and {}", summary.display(), curves.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Gradcheck) => {
            eprintln!("gradcheck failed");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
