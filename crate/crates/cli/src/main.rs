use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use torquesense::io::{self, EvaluateInputs, Manifest, RunConfig};
use torquesense::Result;

/// Photo-reflector joint torque sensor toolkit.
#[derive(Parser)]
#[command(name = "torquesense", version)]
struct Cli {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic datasets of a run.
    Simulate,
    /// Fit LS and QP calibration models.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        /// Zero-torque record for the resolution summary.
        #[arg(long)]
        quiet: Option<PathBuf>,
    },
    /// Compute sensor metrics for one or more models.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Cycle segments; defaults to `<data stem>.cycles.csv`.
        #[arg(long)]
        cycles: Option<PathBuf>,
        #[arg(long)]
        quiet: Option<PathBuf>,
        #[arg(long)]
        crosstalk_x: Option<PathBuf>,
        #[arg(long)]
        crosstalk_y: Option<PathBuf>,
    },
    /// Fit the rational drift model and compensate drift records.
    TempFit {
        #[arg(long)]
        thermal: PathBuf,
        #[arg(long = "drift")]
        drift: Vec<PathBuf>,
    },
    /// Closed-loop torque control simulations.
    ControlSim {
        #[arg(long)]
        model: PathBuf,
    },
    /// Solve a dense QP given as CSV blocks and print the solution.
    QpSolve { problem: PathBuf },
    /// Consolidate a run directory into report.md.
    Report {
        /// Run directory; defaults to --out.
        run: Option<PathBuf>,
    },
    /// Every stage in sequence, then the report.
    Run,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = io::load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_manifest(m: &Manifest) {
    for n in &m.notes {
        println!("{}: {n}", m.stage);
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::Simulate => print_manifest(&io::cmd_simulate(&config(cli)?, out)?),
        Command::Calibrate { data, quiet } => {
            print_manifest(&io::cmd_calibrate(&config(cli)?, data, quiet.as_deref(), out)?)
        }
        Command::Evaluate {
            data,
            models,
            cycles,
            quiet,
            crosstalk_x,
            crosstalk_y,
        } => {
            let inputs = EvaluateInputs {
                data,
                cycles: cycles.as_deref(),
                models: models.iter().map(PathBuf::as_path).collect(),
                quiet: quiet.as_deref(),
                crosstalk_x: crosstalk_x.as_deref(),
                crosstalk_y: crosstalk_y.as_deref(),
            };
            let m = io::cmd_evaluate(&config(cli)?, &inputs, out)?;
            print!("{}", std::fs::read_to_string(out.join("metrics.md")).unwrap_or_default());
            print_manifest(&m);
        }
        Command::TempFit { thermal, drift } => {
            let records: Vec<&Path> = drift.iter().map(PathBuf::as_path).collect();
            print_manifest(&io::cmd_temp_fit(&config(cli)?, thermal, &records, out)?)
        }
        Command::ControlSim { model } => print_manifest(&io::cmd_control_sim(&config(cli)?, model, out)?),
        Command::QpSolve { problem } => {
            // The solution is printed even when the problem is infeasible.
            let result = io::cmd_qp_solve(problem, Some(out));
            match &result {
                Ok(text) => print!("{text}"),
                Err(torquesense::Error::Infeasible(_)) => {
                    if let Ok(text) = std::fs::read_to_string(out.join("qp_solution.toml")) {
                        print!("{text}");
                    }
                }
                Err(_) => {}
            }
            result?;
        }
        Command::Report { run } => {
            let path = io::cmd_report(run.as_deref().unwrap_or(out))?;
            println!("report: {}", path.display());
        }
        Command::Run => {
            let path = io::cmd_run(&config(cli)?, out)?;
            println!("report: {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
