use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hac_refine_cli::{apply_seed_override, CliError, PipelineConfig, Runner, StageOutcome, SEED_ENV};

#[derive(Parser)]
#[command(
    name = "hac-refine",
    version,
    about = "Uncertainty-gated hybrid active-contour refinement of PET/CT segmentations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON pipeline configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; overrides the config.
    #[arg(long)]
    jobs: Option<usize>,
    /// Per-case progress on stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort into the input directory.
    Phantom(Common),
    /// Crop, resample and normalize raw cases.
    Preprocess(Common),
    /// Score ensemble agreement and flag uncertain cases.
    Uncertainty(Common),
    /// Refine flagged cases.
    Refine(Common),
    /// Compare final masks with ground truth.
    Evaluate(Common),
    /// preprocess, uncertainty, refine and evaluate in sequence.
    Pipeline(Common),
}

fn run(cli: Cli) -> Result<Vec<StageOutcome>, CliError> {
    let (common, command) = match &cli.command {
        Command::Phantom(c)
        | Command::Preprocess(c)
        | Command::Uncertainty(c)
        | Command::Refine(c)
        | Command::Evaluate(c)
        | Command::Pipeline(c) => (c, &cli.command),
    };
    let mut cfg = PipelineConfig::load(&common.config)?;
    if common.jobs.is_some() {
        cfg.jobs = common.jobs;
    }
    apply_seed_override(&mut cfg, std::env::var(SEED_ENV).ok().as_deref())?;
    let runner = Runner::new(cfg, common.verbose)?;
    Ok(match command {
        Command::Phantom(_) => vec![runner.phantom()?],
        Command::Preprocess(_) => vec![runner.preprocess()?],
        Command::Uncertainty(_) => vec![runner.uncertainty()?],
        Command::Refine(_) => vec![runner.refine()?],
        Command::Evaluate(_) => vec![runner.evaluate()?],
        Command::Pipeline(_) => runner.pipeline()?,
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcomes) => {
            let mut failed = 0;
            for o in &outcomes {
                eprintln!("{}: {} cases done, {} failed", o.stage.name(), o.processed, o.failures.len());
                for f in &o.failures {
                    eprintln!("  {}: {}", f.case_id, f.error);
                }
                failed += o.failures.len();
            }
            ExitCode::from(u8::from(failed > 0))
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
