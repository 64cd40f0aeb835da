//! `generate-data`: materialize endpoint draws from an analytic target into
//! a dataset file for reuse across training, evaluation, and reruns.

use std::path::{Path, PathBuf};

use vfm_core::training::data::{
    FactorizedCategorical, PolygonClouds, RingMixture, Target,
};

use crate::config::{artifact_hash, load_file, to_table, GenerateFile, GenerateResolved};
use crate::dataset::{generate, save_dataset, DatasetHeader};
use crate::error::{CliError, Result};
use crate::manifest::ManifestWriter;

/// Built-in target shortcuts addressable from the command line; full
/// parameterizations go through the config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[clap(rename_all = "kebab-case")]
pub enum TargetName {
    /// Eight-component Gaussian ring, labeled by component index.
    Ring,
    /// Factorized categorical target over eight 4-way blocks.
    Categorical,
    /// Typed hexagon point clouds, labeled by circumradius.
    Hexagon,
}

impl TargetName {
    pub fn target(self) -> Target {
        match self {
            TargetName::Ring => Target::Ring(RingMixture::default()),
            TargetName::Categorical => {
                Target::Factorized(FactorizedCategorical::standard(8, 4))
            }
            TargetName::Hexagon => Target::Polygon(PolygonClouds::default()),
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in target shortcut (full parameterizations via --config).
    #[arg(long, value_enum)]
    pub target: Option<TargetName>,
    /// Number of rows to draw.
    #[arg(long)]
    pub n: Option<usize>,
    /// Run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Manifest path (default: beside the output).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn resolve(args: &GenerateArgs) -> Result<GenerateResolved> {
    let file: GenerateFile = match &args.config {
        Some(p) => load_file(p)?,
        None => GenerateFile::default(),
    };
    let target = args
        .target
        .map(TargetName::target)
        .or(file.target)
        .ok_or_else(|| CliError::config("no target given: pass --target or set [target]"))?;
    let out = args
        .out
        .clone()
        .or(file.out)
        .ok_or_else(|| CliError::config("no output path given: pass --out or set out"))?;
    Ok(GenerateResolved {
        target,
        n: args.n.or(file.n).unwrap_or(1000),
        seed: args.seed.or(file.seed).unwrap_or(0),
        out,
    })
}

pub fn run(
    resolved: &GenerateResolved,
    config_path: Option<&Path>,
    manifest_path: Option<&Path>,
) -> Result<()> {
    if resolved.n == 0 {
        return Err(CliError::config("n must be positive"));
    }
    let hash = artifact_hash(resolved, &["out"])?;
    let mut manifest = ManifestWriter::begin(
        "generate-data",
        config_path,
        resolved.seed,
        to_table(resolved)?,
        &resolved.out,
        manifest_path,
    );

    let (states, labels) = generate(&resolved.target, resolved.n, resolved.seed);
    let header = DatasetHeader {
        seed: resolved.seed,
        n: resolved.n,
        labeled: resolved.target.labeled(),
        config_hash: hash,
        target: resolved.target.clone(),
        space: resolved.target.space(),
    };
    save_dataset(&resolved.out, &header, &states, &labels)?;

    manifest.add_output(&resolved.out);
    manifest.note("rows", resolved.n as i64);
    manifest.note("labeled", header.labeled);
    let manifest_file = manifest.finish()?;
    eprintln!(
        "wrote {} rows to {} (manifest {})",
        resolved.n,
        resolved.out.display(),
        manifest_file.display()
    );
    Ok(())
}
