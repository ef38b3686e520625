use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use geofuse_cli::config::{parse_seeds, parse_variants};
use geofuse_cli::{gen_data, gradcheck_all, heatmap, json, run, CliError, CliResult, ExperimentConfig};
use geofuse_core::synthdata::Split;

#[derive(Parser)]
#[command(name = "geofuse", version, about = "Geometry-fusion ablations on a synthetic shortcut task")]
struct Cli {
    /// Run the gradient-check suite and exit.
    #[arg(long)]
    gradcheck: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (variant, seed) pair and the optional sweep.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds, overriding the config.
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated variants (a-f), overriding the config.
        #[arg(long)]
        variants: Option<String>,
        /// Leave wall-clock fields out of the report.
        #[arg(long)]
        no_timestamps: bool,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Export relevance and gate CSVs for one sample of a finished run.
    Heatmap {
        /// A run directory, e.g. `<out>/runs/a-seed1`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Defaults to `<run>/heatmaps/<split>-<sample>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured dataset as JSON lines.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn gradcheck(tol: f64) -> CliResult<()> {
    let (reports, verdict) = gradcheck_all(tol);
    print!("{}", json::to_string_pretty(&reports).map_err(anyhow::Error::from)?);
    verdict
}

fn dispatch(cli: Cli) -> CliResult<()> {
    if cli.gradcheck {
        return gradcheck(1e-4);
    }
    let Some(command) = cli.command else {
        return Err(anyhow::anyhow!("no command given; see --help").into());
    };
    match command {
        Command::Run {
            config,
            out,
            seeds,
            variants,
            no_timestamps,
        } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(CliError::Config)?;
            if let Some(s) = seeds {
                cfg.seeds = parse_seeds(&s).map_err(CliError::Config)?;
            }
            if let Some(v) = variants {
                cfg.variants = parse_variants(&v).map_err(CliError::Config)?;
            }
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let report = run::run_experiment(&cfg, &out, !no_timestamps)?;
            print!("{}", report.summary_markdown());
            Ok(())
        }
        Command::Gradcheck { tol } => gradcheck(tol),
        Command::Heatmap { run, sample, split, out } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let name = if matches!(split, Split::Train) { "train" } else { "test" };
            let out = out.unwrap_or_else(|| run.join("heatmaps").join(format!("{name}-{sample}")));
            for p in heatmap::export_heatmaps(&run, sample, split, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config).map_err(CliError::Config)?;
            let n = gen_data(&cfg, &out)?;
            eprintln!("wrote {n} samples to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
