use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use memecap::{grid, run_pipeline, run_stage, Config, PipelineError, Stage, StageOptions, Workspace};

/// Meme captioning pipeline.
#[derive(Debug, Parser)]
#[command(name = "memecap", version)]
struct Cli {
    /// A stage name, `all`, or `grid-search`.
    command: String,
    #[arg(long, default_value = "memecap.toml")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// annotate-serve: export from the stored responses without serving.
    #[arg(long)]
    export_only: bool,
    /// evaluate: compare against another report or evaluate directory.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// evaluate: compare even across different configurations.
    #[arg(long)]
    force: bool,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut config = Config::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let ws = Workspace::new(config, cli.workers);
    let opts = StageOptions { export_only: cli.export_only, compare: cli.compare, force: cli.force };
    match cli.command.as_str() {
        "all" => {
            run_pipeline(&ws, &opts)?;
        }
        "grid-search" => {
            let r = grid::run_grid(&ws)?;
            println!("{}", r.to_csv().trim_end());
            println!("best: {:?}", r.best_point());
        }
        name => {
            let stage = Stage::parse(name).ok_or_else(|| {
                let names: Vec<&str> = Stage::ALL.iter().map(|s| s.as_str()).collect();
                PipelineError::Config(format!("unknown command {name:?}; expected {}, all or grid-search", names.join(", ")))
            })?;
            run_stage(&ws, stage, &opts)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
