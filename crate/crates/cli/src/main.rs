use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tapercast_cli::{PipelineRun, Stage};

#[derive(Parser)]
#[command(
    name = "tapercast",
    version,
    about = "Postprocess gridded ensemble forecasts"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "tapercast.toml")]
    config: PathBuf,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic archive described by the config's [synth] section.
    Synth,
    /// Tune moving-average weights per validation year.
    Tune,
    /// Fit SMA, EMA and the four NGR variants.
    Marginal,
    /// Fit tapered-PCA and exponential-nugget covariance models.
    Cov,
    /// Draw joint forecasts (mc, ac, GS, ECC, Schaake).
    Sample,
    /// Score every method and run permutation tests.
    Score,
    /// Render comparison tables and calibration data.
    Report,
    /// Run tune through report, generating a synthetic archive first if needed.
    All,
    /// Show which stages are complete.
    Status,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let run = match PipelineRun::load(&cli.config, cli.seed) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let outcome = match cli.command {
        Command::Synth => run.run_stage(Stage::Synth),
        Command::Tune => run.run_stage(Stage::Tune),
        Command::Marginal => run.run_stage(Stage::Marginal),
        Command::Cov => run.run_stage(Stage::Cov),
        Command::Sample => run.run_stage(Stage::Sample),
        Command::Score => run.run_stage(Stage::Score),
        Command::Report => run.run_stage(Stage::Report),
        Command::All => run.run_all(),
        Command::Status => {
            for &stage in [Stage::Synth].iter().chain(run.stages()) {
                println!("{}\t{:?}", stage.name(), run.status(stage));
            }
            Ok(())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
