use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ispppa_bench::config::ExperimentConfig;
use ispppa_bench::dataset::gen_synthetic;
use ispppa_bench::experiment::{fit_report, from_csv, prepare, run_experiment, write_artifacts};
use ispppa_bench::plot;

#[derive(Parser)]
#[command(name = "ispppa", about = "Rate experiments for the inexact stochastic proximal point method")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and write `<name>.bin` and `<name>.manifest`.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Solve the full-batch problem and write `<name>.reference.txt`.
    Ref {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run all trials and write CSV, fit report, SVG and the resolved config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Fit log-log slopes to the columns of a CSV.
    Fit {
        csv: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        window: f64,
    },
    /// Render a CSV as a log-log SVG.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.dataset.seed = s;
            }
            let ds = gen_synthetic(&cfg.dataset)?;
            ds.save(&out, &cfg.name)?;
            println!("wrote {}", out.join(format!("{}.bin", cfg.name)).display());
        }
        Command::Ref { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.reference.context("config has no [reference] section")?;
            let prep = prepare(&cfg)?;
            let r = prep.reference.as_ref().expect("reference requested");
            let mut text = String::new();
            writeln!(text, "value = {:?}", r.value)?;
            writeln!(text, "kkt = {:?}", r.kkt)?;
            writeln!(text, "kkt_alpha = {:?}", r.kkt_alpha)?;
            writeln!(text, "iterations = {}", r.iterations)?;
            let xs: Vec<String> = r.x.iter().map(|v| format!("{v:?}")).collect();
            writeln!(text, "x = [{}]", xs.join(", "))?;
            fs::create_dir_all(&out)?;
            let path = out.join(format!("{}.reference.txt", cfg.name));
            fs::write(&path, text)?;
            println!("φ* = {:?}, KKT residual {:e}; wrote {}", r.value, r.kkt, path.display());
        }
        Command::Run { config, seed, trials, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if let Some(t) = trials {
                cfg.run.trials = t;
            }
            let prep = prepare(&cfg)?;
            let result = run_experiment(&prep)?;
            let csv = write_artifacts(&prep, &result, &out)?;
            print!("{}", fit_report(&result.mean, cfg.diagnostics.fit_window));
            println!("wrote {}", csv.display());
        }
        Command::Fit { csv, window } => {
            let series = from_csv(&fs::read_to_string(&csv)?)?;
            print!("{}", fit_report(&series, window));
        }
        Command::Plot { csv, out } => {
            let series = from_csv(&fs::read_to_string(&csv)?)?;
            let title = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            fs::write(&out, plot::svg(&series, &title))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
