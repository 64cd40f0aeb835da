use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vfm_cli::commands::{audit, eval, generate_data, rerun, sample, train};
use vfm_cli::error::Result;

/// Flow-matching models with variational posteriors: train, sample with
/// optional control, evaluate, and audit symmetry properties.
#[derive(Debug, Parser)]
#[command(name = "vfm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Materialize endpoint draws from an analytic target into a dataset file.
    GenerateData(generate_data::GenerateArgs),
    /// Fit a posterior head; writes a checkpoint, a metrics CSV, and a manifest.
    Train(train::TrainArgs),
    /// Integrate chains from a checkpoint into a samples CSV.
    Sample(sample::SampleArgs),
    /// Compare a reference dataset against samples and append metric rows.
    Eval(eval::EvalArgs),
    /// Verify the symmetry hypotheses and the invariance they imply.
    EquivarianceAudit(audit::AuditArgs),
    /// Replay a run from its manifest snapshot.
    Rerun(rerun::RerunArgs),
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::GenerateData(args) => {
            let resolved = generate_data::resolve(args)?;
            generate_data::run(&resolved, args.config.as_deref(), args.manifest.as_deref())
        }
        Command::Train(args) => {
            let resolved = train::resolve(args)?;
            train::run(&resolved, args.config.as_deref(), args.manifest.as_deref())
        }
        Command::Sample(args) => {
            let resolved = sample::resolve(args)?;
            sample::run(&resolved, args.config.as_deref(), args.manifest.as_deref())
        }
        Command::Eval(args) => {
            let resolved = eval::resolve(args)?;
            eval::run(&resolved, args.config.as_deref(), args.manifest.as_deref())
        }
        Command::EquivarianceAudit(args) => {
            let resolved = audit::resolve(args)?;
            audit::run(&resolved, args.config.as_deref(), args.manifest.as_deref())
        }
        Command::Rerun(args) => rerun::run(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
