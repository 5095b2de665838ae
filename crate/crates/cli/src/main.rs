use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geoinvert_cli::config::InversionConfig;
use geoinvert_cli::error::{io_err, CliResult};
use geoinvert_cli::experiments::scaling_test;
use geoinvert_cli::export::{extract_slice, read_model, write_slice};
use geoinvert_cli::inversion::{build_problem, simulate};

#[derive(Parser)]
#[command(name = "geoinvert", version, about = "Tensor-mesh geophysical inversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an inversion described by a config file.
    Invert {
        config: PathBuf,
        /// Override a config key, e.g. `--set scheduler.n_workers=4`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
    },
    /// Simulate data for the true model of a config and write them as JSON.
    Forward {
        config: PathBuf,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "data.json")]
        out: PathBuf,
    },
    /// Weak-scaling harness over equal-cost synthetic batches.
    ScalingTest {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        workers: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        batches_per_worker: usize,
        #[arg(long, default_value_t = 48)]
        cells: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value = "scaling.csv")]
        out: PathBuf,
    },
    /// Write an orthogonal slice of a model file.
    Export {
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        axis: usize,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Invert { config, overrides } => {
            let cfg = InversionConfig::load(&config, &overrides)?;
            let report = geoinvert_cli::run_inversion(&cfg)?;
            for s in &report.stages {
                println!(
                    "stage {} (cycle {}) {:?}: objective {:.6e} -> {:.6e} in {} iterations",
                    s.stage,
                    s.cycle,
                    s.frequencies,
                    s.state.initial_objective,
                    s.state.final_objective(),
                    s.state.history.len()
                );
            }
            println!("relative model error {:.4}", report.model_error);
            println!("convergence: {}", report.convergence.display());
            println!("model: {}", report.model_file.display());
        }
        Command::Forward { config, overrides, out } => {
            let cfg = InversionConfig::load(&config, &overrides)?;
            let problem = build_problem(&cfg)?;
            let data = simulate(&problem, &problem.truth)?;
            std::fs::write(&out, serde_json::to_string(&data)?).map_err(io_err(&out))?;
            println!("{} data written to {}", data.len(), out.display());
        }
        Command::ScalingTest { workers, batches_per_worker, cells, trials, out } => {
            let r = scaling_test(&workers, batches_per_worker, cells, trials, &out)?;
            for (n, e) in &r.efficiency {
                println!("{n} workers: median {:.4} s, efficiency {e:.1}%", r.timings[n]);
            }
            println!("samples: {}", r.csv.display());
        }
        Command::Export { model, axis, index, out } => {
            let (shape, values) = read_model(&model)?;
            let slice = extract_slice(&shape, &values, axis, index)?;
            write_slice(&out, &slice)?;
            println!("slice {:?} written to {}", slice.shape, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
