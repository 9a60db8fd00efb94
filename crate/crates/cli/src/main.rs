//! Command-line runner for model-hijacking experiments.
//!
//! Exit codes: 0 success, 1 comparison differences, 2 config/usage errors,
//! 3 data/format errors, 4 numeric/training errors, 5 I/O errors.

use clap::{Parser, Subcommand};
use hijacklab_core::report::{compare, ExperimentReport};
use hijacklab_core::{config, runner, Error};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hijacklab")]
#[command(version)]
#[command(about = "Train small models, hijack them by distance rules, and measure the defenses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config file and report every violation.
    Validate {
        /// Path to the JSON run configuration.
        config: PathBuf,
    },
    /// Execute the study a config describes and write its report.
    Run {
        /// Path to the JSON run configuration.
        config: PathBuf,
        /// Output directory (overrides the config's output_dir).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Numerically diff two reports of the same study.
    Compare {
        report_a: PathBuf,
        report_b: PathBuf,
        /// Largest tolerated absolute difference per numeric field.
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
    },
    /// Re-run every bundled example config.
    Demo {
        /// Directory holding the example configs.
        #[arg(long, default_value = "configs")]
        configs: PathBuf,
        /// Root directory for the regenerated reports.
        #[arg(long, default_value = "runs/demo")]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = config::validate_file(&config)?;
            println!("ok: {} study '{}'", config.display(), cfg.study.kind());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, output } => {
            let (report, dir) = runner::run_config_file(&config, output.as_deref())?;
            println!(
                "ok: study '{}' finished in {:.3}s, report at {}",
                report.study,
                report.wall_clock_s,
                dir.join("report.json").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare {
            report_a,
            report_b,
            tolerance,
        } => {
            let a = ExperimentReport::load(&report_a)?;
            let b = ExperimentReport::load(&report_b)?;
            let diffs = compare(
                &serde_json::to_value(&a)
                    .map_err(|e| Error::Format(format!("report A: {e}")))?,
                &serde_json::to_value(&b)
                    .map_err(|e| Error::Format(format!("report B: {e}")))?,
                tolerance,
            )?;
            if diffs.is_empty() {
                println!("reports match within tolerance {tolerance}");
                Ok(ExitCode::SUCCESS)
            } else {
                for d in &diffs {
                    println!("{d}");
                }
                println!("{} field(s) differ beyond tolerance {tolerance}", diffs.len());
                Ok(ExitCode::from(1))
            }
        }
        Command::Demo { configs, output } => {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&configs)
                .map_err(|e| Error::io(&configs, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
                .collect();
            entries.sort();
            if entries.is_empty() {
                return Err(Error::Config(format!(
                    "no .json configs under {}",
                    configs.display()
                )));
            }
            for path in entries {
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "config".into());
                let dir = output.join(&name);
                let (report, _) = runner::run_config_file(&path, Some(&dir))?;
                println!(
                    "ok: {} -> {} ({:.3}s)",
                    path.display(),
                    dir.join("report.json").display(),
                    report.wall_clock_s
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
