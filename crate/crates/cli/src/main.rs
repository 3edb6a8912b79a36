use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmmia_cli::commands::{self, Context};
use dmmia_cli::config::{PipelineConfig, Role};
use dmmia_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "dmmia", version, about = "Prototype-guided model inversion pipeline")]
struct Args {
    /// Pipeline config (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Use artifacts produced under a different config digest.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Build the public/private split.
    PrepareData,
    /// Train the attacked classifier on private data.
    TrainTarget,
    /// Train the independent evaluation classifier.
    TrainEval,
    /// Fit the generator prior on public data.
    PretrainGenerator,
    /// Invert every private class with each configured method.
    Attack,
    /// Score the attack outputs.
    Evaluate,
    /// Numerical checks of the Fisher geometry.
    TheoryCheck,
    /// Grid over loss weights and bank sizes.
    Sweep,
    /// Summaries and image grids.
    Report,
    /// prepare-data through report.
    All,
}

fn run(args: &Args) -> CliResult<()> {
    let path = args.config.as_deref().ok_or_else(|| CliError::config("--config <FILE> is required"))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    let ctx = Context::new(cfg, args.force);
    log::info!("config digest {}", ctx.digest);
    let manifests = match args.command {
        Command::PrepareData => vec![commands::prepare_data(&ctx)?],
        Command::TrainTarget => vec![commands::train(&ctx, Role::Target)?],
        Command::TrainEval => vec![commands::train(&ctx, Role::Evaluator)?],
        Command::PretrainGenerator => vec![commands::pretrain(&ctx)?],
        Command::Attack => vec![commands::attack(&ctx)?],
        Command::Evaluate => vec![commands::evaluate(&ctx)?],
        Command::TheoryCheck => vec![commands::theory_check(&ctx)?],
        Command::Sweep => vec![commands::sweep(&ctx)?],
        Command::Report => vec![commands::report(&ctx)?],
        Command::All => commands::run_all(&ctx)?,
    };
    for m in manifests {
        println!("{}: {} outputs in {:.1}s", m.command, m.outputs.len(), m.wall_time_secs);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Args::command().debug_assert();
        let a = Args::try_parse_from(["dmmia", "evaluate", "--force", "-c", "x.toml"]).unwrap();
        assert!(a.force);
        assert_eq!(a.config.as_deref(), Some(std::path::Path::new("x.toml")));
    }
}
