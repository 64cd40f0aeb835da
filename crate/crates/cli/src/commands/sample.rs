//! `sample`: integrate chains from a checkpoint and write the final states
//! as a CSV, optionally dumping full trajectories.
//!
//! Chain randomness is keyed by global chain index, so `--workers n` splits
//! the index range across threads and reassembles bit-identical output to a
//! single-threaded run.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use vfm_core::guidance::PropertyLikelihood;
use vfm_core::heads::{Head, NoiseSchedule};
use vfm_core::path::Prior;
use vfm_core::sampling::{
    sample_chains, GuidanceConfig, IntegratorConfig, SampleError, SampleMode, SampleOutput,
    SampleRun, SamplerConfig, Scheme,
};

use crate::checkpoint::load_checkpoint;
use crate::config::{
    artifact_hash, load_file, to_table, GuideCfg, GuideName, ModeKind, SampleFile,
    SampleResolved, SchemeArg, VelocityCfg,
};
use crate::error::{CliError, Result};
use crate::formats::fmt_f64;
use crate::manifest::ManifestWriter;
use crate::trajectory::{save_trajectories, TrajectoryHeader};

#[derive(Debug, clap::Args)]
pub struct SampleArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to sample from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of chains.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// unconditional | conditioned | guided.
    #[arg(long, value_enum)]
    pub mode: Option<ModeKind>,
    /// Control value for conditioned mode.
    #[arg(long)]
    pub y: Option<f64>,
    /// Velocity evaluations per chain.
    #[arg(long)]
    pub nfe: Option<u64>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Guidance likelihood for guided mode.
    #[arg(long, value_enum)]
    pub guide: Option<GuideName>,
    /// Guidance target value.
    #[arg(long)]
    pub target: Option<f64>,
    /// Guidance observation noise.
    #[arg(long)]
    pub sigma_y: Option<f64>,
    /// Refinement iterations per velocity evaluation in guided mode.
    #[arg(long)]
    pub inner_steps: Option<usize>,
    /// Refinement damping in (0, 1].
    #[arg(long)]
    pub damping: Option<f64>,
    /// Samples CSV output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also dump full integration paths to this file.
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// Threads to spread chains over (output is worker-count invariant).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Manifest path (default: beside the CSV).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// Pull one typed key out of the train-config table a checkpoint embeds.
fn embedded<T: DeserializeOwned>(table: &toml::Table, key: &str) -> Option<T> {
    table.get(key).and_then(|v| v.clone().try_into().ok())
}

pub fn resolve(args: &SampleArgs) -> Result<SampleResolved> {
    let file: SampleFile = match &args.config {
        Some(p) => load_file(p)?,
        None => SampleFile::default(),
    };

    let checkpoint = args
        .checkpoint
        .clone()
        .or(file.checkpoint)
        .ok_or_else(|| CliError::config("no checkpoint: pass --checkpoint or set checkpoint"))?;
    let (_, header) = load_checkpoint(&checkpoint)?;
    let conditioned = header.architecture.conditioned();

    // Path settings default to the values the checkpoint was trained with.
    let velocity = file
        .velocity
        .or_else(|| embedded::<VelocityCfg>(&header.train_config, "velocity"))
        .unwrap_or_default();
    let schedule = file
        .schedule
        .or_else(|| embedded::<NoiseSchedule>(&header.train_config, "schedule"))
        .unwrap_or_default();
    let prior = file
        .prior
        .or_else(|| embedded::<Prior>(&header.train_config, "prior"))
        .unwrap_or_default();

    let mode = args.mode.or(file.mode).unwrap_or(ModeKind::Unconditional);
    let y = args.y.or(file.y);
    if y.is_some() && mode != ModeKind::Conditioned {
        return Err(CliError::config("--y only applies to --mode conditioned"));
    }
    if mode == ModeKind::Conditioned {
        if !conditioned {
            return Err(CliError::config(
                "conditioned sampling needs a checkpoint trained with a control pathway",
            ));
        }
        if y.is_none() {
            return Err(CliError::config("conditioned mode needs a control value: pass --y"));
        }
    }

    let guide = if mode == ModeKind::Guided {
        if conditioned {
            return Err(CliError::config(
                "guided sampling steers an unconditioned head; this checkpoint has a control \
                 pathway",
            ));
        }
        let property = args
            .guide
            .map(GuideName::property)
            .or(file.guide.as_ref().map(|g| g.property.clone()))
            .ok_or_else(|| {
                CliError::config("guided mode needs a likelihood: pass --guide or set [guide]")
            })?;
        let target = args
            .target
            .or(file.guide.as_ref().map(|g| g.target))
            .ok_or_else(|| CliError::config("guided mode needs a target value: pass --target"))?;
        let sigma_y = args
            .sigma_y
            .or(file.guide.as_ref().map(|g| g.sigma_y))
            .unwrap_or(0.1);
        if !(sigma_y > 0.0) {
            return Err(CliError::config("sigma_y must be positive"));
        }
        Some(GuideCfg { property, sigma_y, target })
    } else {
        if args.guide.is_some() || args.target.is_some() || args.sigma_y.is_some() {
            return Err(CliError::config(
                "--guide/--target/--sigma-y only apply to --mode guided",
            ));
        }
        None
    };

    let scheme = args.scheme.map(SchemeArg::scheme).or(file.scheme).unwrap_or(Scheme::Euler);
    let nfe = args.nfe.or(file.nfe).unwrap_or(100);
    match scheme {
        Scheme::Euler => {}
        Scheme::Rk4 => {
            if nfe % 4 != 0 {
                return Err(CliError::config(format!(
                    "rk4 spends 4 velocity evaluations per step; nfe = {nfe} is not a multiple \
                     of 4"
                )));
            }
        }
    }

    let default_guidance = GuidanceConfig::default();
    let property = file
        .property
        .or_else(|| guide.as_ref().map(|g| g.property.clone()));

    Ok(SampleResolved {
        checkpoint,
        n: args.n.or(file.n).unwrap_or(1000),
        seed: args.seed.or(file.seed).unwrap_or(0),
        mode,
        y,
        nfe,
        scheme,
        velocity,
        schedule,
        prior,
        guide,
        inner_steps: args.inner_steps.or(file.inner_steps).unwrap_or(default_guidance.iterations),
        damping: args.damping.or(file.damping).unwrap_or(default_guidance.damping),
        divergence_cap: file.divergence_cap.unwrap_or(default_guidance.divergence_cap),
        residual_tol: file.residual_tol.unwrap_or(default_guidance.residual_tol),
        property,
        out: args
            .out
            .clone()
            .or(file.out)
            .ok_or_else(|| CliError::config("no output path: pass --out or set out"))?,
        trajectories: args.trajectories.clone().or(file.trajectories),
        workers: args.workers.or(file.workers).unwrap_or(1),
    })
}

fn map_sample_error(e: SampleError) -> CliError {
    match e {
        SampleError::ModeMismatch(msg) => CliError::config(msg),
        other => CliError::data(other.to_string()),
    }
}

/// Split `n` chains over `workers` contiguous ranges and run them, merging in
/// index order. The single-worker path never spawns a thread.
fn run_chains(
    head: &Head,
    cfg: &SamplerConfig,
    n: usize,
    seed: u64,
    workers: usize,
) -> Result<SampleRun> {
    if workers <= 1 {
        return sample_chains(head, cfg, 0, n, seed).map_err(map_sample_error);
    }
    let workers = workers.min(n.max(1));
    let base = n / workers;
    let extra = n % workers;
    let mut ranges = Vec::with_capacity(workers);
    let mut first = 0usize;
    for w in 0..workers {
        let count = base + usize::from(w < extra);
        ranges.push((first, count));
        first += count;
    }

    let parts: Vec<std::result::Result<SampleRun, SampleError>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = ranges
                .iter()
                .map(|&(first, count)| {
                    scope.spawn(move || sample_chains(head, cfg, first, count, seed))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });

    let mut outputs = Vec::with_capacity(n);
    let mut nfe = 0u64;
    let mut refine = vfm_core::sampling::RefineStats::default();
    for part in parts {
        let part = part.map_err(map_sample_error)?;
        outputs.extend(part.outputs);
        nfe += part.nfe;
        refine.calls += part.refine.calls;
        refine.converged += part.refine.converged;
        refine.diverged += part.refine.diverged;
    }
    Ok(SampleRun { outputs, nfe, refine })
}

pub fn run(
    resolved: &SampleResolved,
    config_path: Option<&Path>,
    manifest_path: Option<&Path>,
) -> Result<()> {
    if resolved.n == 0 {
        return Err(CliError::config("n must be positive"));
    }
    let (head, _header) = load_checkpoint(&resolved.checkpoint)?;
    let space = head.space().clone();

    let steps = match resolved.scheme {
        Scheme::Euler => resolved.nfe as usize,
        Scheme::Rk4 => (resolved.nfe / 4) as usize,
    };
    let mode = match resolved.mode {
        ModeKind::Unconditional => SampleMode::Unconditional,
        ModeKind::Conditioned => SampleMode::Conditioned(
            resolved.y.ok_or_else(|| CliError::config("conditioned mode needs a y value"))?,
        ),
        ModeKind::Guided => {
            let g = resolved
                .guide
                .as_ref()
                .ok_or_else(|| CliError::config("guided mode needs [guide] settings"))?;
            SampleMode::Guided {
                likelihood: PropertyLikelihood::new(g.property.clone(), g.sigma_y, g.target),
                guidance: GuidanceConfig {
                    iterations: resolved.inner_steps,
                    damping: resolved.damping,
                    divergence_cap: resolved.divergence_cap,
                    residual_tol: resolved.residual_tol,
                },
            }
        }
    };
    let cfg = SamplerConfig {
        integrator: IntegratorConfig { scheme: resolved.scheme, steps },
        velocity: resolved.velocity.build()?,
        schedule: resolved.schedule,
        prior: resolved.prior,
        mode,
        keep_trajectories: resolved.trajectories.is_some(),
    };

    let hash = artifact_hash(resolved, &["out", "trajectories", "workers"])?;
    let mut manifest = ManifestWriter::begin(
        "sample",
        config_path,
        resolved.seed,
        to_table(resolved)?,
        &resolved.out,
        manifest_path,
    );

    let run = run_chains(&head, &cfg, resolved.n, resolved.seed, resolved.workers)?;

    write_samples_csv(&resolved.out, resolved, &space, &run.outputs)?;
    manifest.add_output(&resolved.out);

    if let Some(traj_path) = &resolved.trajectories {
        let chains: Vec<_> = run
            .outputs
            .iter()
            .map(|o| {
                o.trajectory
                    .as_ref()
                    .ok_or_else(|| CliError::data("trajectory retention was not enabled"))
            })
            .collect::<Result<_>>()?;
        let header = TrajectoryHeader {
            seed: resolved.seed,
            n_chains: resolved.n,
            frames: steps + 1,
            dim: space.total_dim(),
            steps,
            scheme: resolved.scheme,
            mode: mode_name(resolved.mode).to_string(),
            config_hash: hash.clone(),
        };
        save_trajectories(traj_path, &header, &chains)?;
        manifest.add_output(traj_path);
    }

    let nfe_per_chain = run.outputs.first().map(|o| o.nfe).unwrap_or(0);
    debug_assert!(run.outputs.iter().all(|o| o.nfe == nfe_per_chain));
    manifest.note("chains", resolved.n as i64);
    manifest.note("nfe_per_chain", nfe_per_chain as i64);
    manifest.note("total_nfe", run.nfe as i64);
    manifest.note("workers", resolved.workers as i64);
    if resolved.mode == ModeKind::Guided {
        manifest.note("refine_calls", run.refine.calls as i64);
        manifest.note("refine_converged", run.refine.converged as i64);
        manifest.note("refine_diverged", run.refine.diverged as i64);
    }
    let manifest_file = manifest.finish()?;
    eprintln!(
        "sampled {} chains ({} velocity evaluations each) -> {} (manifest {})",
        resolved.n,
        nfe_per_chain,
        resolved.out.display(),
        manifest_file.display()
    );
    Ok(())
}

pub fn mode_name(mode: ModeKind) -> &'static str {
    match mode {
        ModeKind::Unconditional => "unconditional",
        ModeKind::Conditioned => "conditioned",
        ModeKind::Guided => "guided",
    }
}

/// Rows are the flattened final state (categorical blocks still in simplex
/// coordinates) plus the argmax decode per block; the y column carries the
/// control value in conditioned mode and the guidance target in guided mode.
fn write_samples_csv(
    path: &Path,
    resolved: &SampleResolved,
    space: &vfm_core::path::SpaceSpec,
    outputs: &[SampleOutput],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;

    let mut header: Vec<String> =
        vec!["idx".into(), "mode".into(), "seed".into(), "y".into()];
    for d in 0..space.total_dim() {
        header.push(format!("v{d}"));
    }
    for b in 0..space.n_blocks() {
        header.push(format!("c{b}"));
    }
    if resolved.property.is_some() {
        header.push("property".into());
    }
    w.write_record(&header).map_err(|e| CliError::data(e.to_string()))?;

    let y_field = match resolved.mode {
        ModeKind::Unconditional => String::new(),
        ModeKind::Conditioned => fmt_f64(resolved.y.unwrap_or(f64::NAN)),
        ModeKind::Guided => {
            fmt_f64(resolved.guide.as_ref().map(|g| g.target).unwrap_or(f64::NAN))
        }
    };
    let mode_field = mode_name(resolved.mode);

    for (idx, out) in outputs.iter().enumerate() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.push(idx.to_string());
        row.push(mode_field.to_string());
        row.push(resolved.seed.to_string());
        row.push(y_field.clone());
        for v in &out.state.values {
            row.push(fmt_f64(*v));
        }
        for c in &out.classes {
            row.push(c.to_string());
        }
        if let Some(p) = &resolved.property {
            row.push(fmt_f64(p.eval(space, &out.state.values)));
        }
        w.write_record(&row).map_err(|e| CliError::data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
