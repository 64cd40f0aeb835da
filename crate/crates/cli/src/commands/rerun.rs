//! `rerun`: replay a previous run from its manifest's resolved-config
//! snapshot. Inputs (checkpoints, datasets) are read from their original
//! locations; `--out-dir` redirects every output so the replay can be
//! compared byte-for-byte against the original.

use std::path::PathBuf;

use crate::commands::{audit, eval, generate_data, redirect, sample, train};
use crate::config::{
    AuditResolved, EvalResolved, GenerateResolved, SampleResolved, TrainResolved,
};
use crate::error::{CliError, Result};
use crate::manifest::read_manifest;

#[derive(Debug, clap::Args)]
pub struct RerunArgs {
    /// Manifest of the run to reproduce.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs into this directory instead of the original paths.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run(args: &RerunArgs) -> Result<()> {
    let manifest = read_manifest(&args.manifest)?;
    let dir = args.out_dir.as_deref();
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    match manifest.command.as_str() {
        "generate-data" => {
            let mut r: GenerateResolved = manifest.resolved_as()?;
            r.out = redirect(&r.out, dir);
            generate_data::run(&r, None, None)
        }
        "train" => {
            let mut r: TrainResolved = manifest.resolved_as()?;
            r.out = redirect(&r.out, dir);
            r.metrics = redirect(&r.metrics, dir);
            train::run(&r, None, None)
        }
        "sample" => {
            let mut r: SampleResolved = manifest.resolved_as()?;
            r.out = redirect(&r.out, dir);
            r.trajectories = r.trajectories.map(|p| redirect(&p, dir));
            sample::run(&r, None, None)
        }
        "eval" => {
            let mut r: EvalResolved = manifest.resolved_as()?;
            r.out = redirect(&r.out, dir);
            eval::run(&r, None, None)
        }
        "equivariance-audit" => {
            let mut r: AuditResolved = manifest.resolved_as()?;
            r.out = redirect(&r.out, dir);
            audit::run(&r, None, None)
        }
        other => Err(CliError::config(format!(
            "manifest records unknown command {other:?}"
        ))),
    }
}
