use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cmo_core::experiment::{make_data, report, run, ExperimentConfig, ResultsManifest, RunOptions};
use cmo_core::{selfcheck, Error};

/// Context-rich minority oversampling experiments.
#[derive(Debug, Parser)]
#[command(name = "cmo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every (method, seed) cell of an experiment config.
    Run {
        config: PathBuf,
        /// Output directory (overrides `out_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Skip cells already completed in an existing manifest.
        #[arg(long)]
        resume: bool,
        /// Do not write model checkpoints.
        #[arg(long)]
        no_checkpoints: bool,
    },
    /// Render mean ± std tables from a results manifest.
    Report {
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Txt)]
        format: Format,
    },
    /// Generate and save the dataset of an experiment config.
    MakeData {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant suite.
    Selfcheck,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Txt,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_CELL_FAILURE: u8 = 2;

fn write(path: PathBuf, text: &str) -> Result<(), Error> {
    fs::write(&path, text).map_err(|source| Error::Io { path, source })
}

fn execute(command: Command) -> Result<u8, Error> {
    match command {
        Command::Run {
            config,
            out,
            jobs,
            resume,
            no_checkpoints,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let summary = run(
                &config,
                &RunOptions {
                    out_dir: out,
                    jobs,
                    resume,
                    checkpoints: !no_checkpoints,
                },
            )?;
            let table = report(&summary.manifest);
            let dir = summary.manifest_path.parent().map(PathBuf::from).unwrap_or_default();
            write(dir.join("report.csv"), &table.to_csv())?;
            write(dir.join("report.txt"), &table.to_text())?;
            print!("{}", table.to_text());
            eprintln!(
                "{} cells trained, {} skipped, {} failed; manifest {}",
                summary.trained,
                summary.skipped,
                summary.failed,
                summary.manifest_path.display()
            );
            for r in &summary.manifest.records {
                if let cmo_core::experiment::CellResult::Failed { error } = &r.result {
                    eprintln!("failed: {} seed {}: {error}", r.method, r.seed);
                }
            }
            Ok(if summary.failed > 0 { EXIT_CELL_FAILURE } else { 0 })
        }
        Command::Report { manifest, format } => {
            let manifest = ResultsManifest::load(&manifest)?;
            let table = report(&manifest);
            match format {
                Format::Csv => print!("{}", table.to_csv()),
                Format::Txt => print!("{}", table.to_text()),
            }
            Ok(0)
        }
        Command::MakeData { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let path = make_data(&config, out.as_deref())?;
            println!("{}", path.display());
            Ok(0)
        }
        Command::Selfcheck => {
            let outcomes = selfcheck::run_all();
            for o in &outcomes {
                if o.passed {
                    println!("PASS  {}", o.name);
                } else {
                    println!("FAIL  {}: {}", o.name, o.detail);
                }
            }
            Ok(if outcomes.iter().all(|o| o.passed) { 0 } else { EXIT_CELL_FAILURE })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
