use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mbrx::error::{Error, Result};
use mbrx::harness::plot::{emit_plots, PlotSpec};
use mbrx::harness::{
    decoder_path, run_experiment, run_oracles, sweep, train_decoder, write_records,
    ExperimentConfig, RunOptions,
};

/// Model-based Bayesian receivers: DeepSIC detection and weighted BP decoding.
#[derive(Parser)]
#[command(name = "mbrx", version)]
struct Cli {
    /// Overrides the seed of every config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for CSVs, decoders and plots.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Record wall-clock block times in `runtime_ms`.
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured decoder offline and store it.
    TrainDecoder { config: PathBuf },
    /// Simulate every block and SNR point of a config.
    Run { config: PathBuf },
    /// Run every config matching a glob and aggregate the results.
    Sweep { pattern: String },
    /// Draw SVG charts of a metric CSV.
    Plot { csv: PathBuf, spec: PathBuf },
    /// Evaluate the exhaustive MAP detector and decoder only.
    Oracle { config: PathBuf },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config {
                field: "threads".into(),
                reason: "must be positive".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    let options = RunOptions {
        out_dir: cli.out_dir.clone(),
        timing: cli.timing,
    };
    match &cli.command {
        Command::TrainDecoder { config } => {
            let c = load(config, cli.seed)?;
            let model = train_decoder(&c)?;
            let path = decoder_path(&c, &cli.out_dir);
            model.save(&path)?;
            println!("{}", path.display());
        }
        Command::Run { config } => {
            let c = load(config, cli.seed)?;
            let records = run_experiment(&c, &options)?;
            log::info!("{} records written to {}", records.len(), cli.out_dir.join(&c.output).display());
        }
        Command::Sweep { pattern } => {
            let paths: Vec<PathBuf> = glob::glob(pattern)
                .map_err(|e| Error::Config {
                    field: "sweep".into(),
                    reason: e.to_string(),
                })?
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Io {
                    path: e.path().to_path_buf(),
                    source: e.into(),
                })?;
            if paths.is_empty() {
                return Err(Error::Config {
                    field: "sweep".into(),
                    reason: format!("no config matches `{pattern}`"),
                });
            }
            let configs = paths
                .iter()
                .map(|p| load(p, cli.seed))
                .collect::<Result<Vec<_>>>()?;
            let records = sweep(&configs, &options)?;
            log::info!("{} configs, {} records", configs.len(), records.len());
        }
        Command::Plot { csv, spec } => {
            for p in emit_plots(csv, &PlotSpec::load(spec)?, &cli.out_dir)? {
                println!("{}", p.display());
            }
        }
        Command::Oracle { config } => {
            let c = load(config, cli.seed)?;
            let records = run_oracles(&c, cli.timing)?;
            write_records(&cli.out_dir.join("oracle.csv"), &records)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
