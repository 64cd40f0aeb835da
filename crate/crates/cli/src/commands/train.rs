//! `train`: fit a posterior head to a target or dataset, producing a
//! checkpoint, a metrics CSV, and a manifest.
//!
//! The optimization loop keys each step's batch randomness by `(seed, step)`,
//! so a run resumed from a step-`s` checkpoint replays steps `s..` exactly as
//! the uninterrupted run would have.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use vfm_core::training::data::Target;
use vfm_core::training::{
    sample_batch, stream_rng, train_step, EndpointSource, TrainConfig, STREAM_DATA_BASE,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint, ArchSpec};
use crate::config::{
    artifact_hash, content_table, load_file, to_table, HeadCfg, LossKind, SourceCfg, TrainFile,
    TrainResolved,
};
use crate::dataset::{load_dataset, Dataset};
use crate::error::{CliError, Result};
use crate::formats::fmt_f64;
use crate::manifest::ManifestWriter;

/// Keys of `TrainResolved` that say where outputs land rather than what
/// gets computed; stripped from artifact hashes and embedded settings.
const TRAIN_LOCATION_KEYS: &[&str] = &["out", "metrics", "manifest"];

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Objective: plain posterior likelihood or the label-conditioned one.
    #[arg(long, value_enum)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub label_dropout: Option<f64>,
    /// Metrics-row cadence in steps.
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Train from a materialized dataset instead of an analytic target.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics CSV output path.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue a run from its checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Manifest path (default: beside the checkpoint).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// What the endpoint source looks like, resolved far enough to validate the
/// loss/head combination without touching any numerics.
struct SourceProbe {
    labeled: bool,
    space: vfm_core::path::SpaceSpec,
    dataset: Option<Dataset>,
    target: Option<Target>,
}

fn probe_source(source: &SourceCfg) -> Result<SourceProbe> {
    match source {
        SourceCfg::Target(t) => Ok(SourceProbe {
            labeled: t.labeled(),
            space: t.space(),
            dataset: None,
            target: Some(t.clone()),
        }),
        SourceCfg::Dataset(path) => {
            let ds = load_dataset(path)?;
            Ok(SourceProbe {
                labeled: ds.header.labeled,
                space: ds.header.space.clone(),
                dataset: Some(ds),
                target: None,
            })
        }
    }
}

pub fn resolve(args: &TrainArgs) -> Result<TrainResolved> {
    let file: TrainFile = match &args.config {
        Some(p) => load_file(p)?,
        None => TrainFile::default(),
    };

    let source = match (&args.dataset, &file.dataset, &file.target) {
        (Some(p), _, _) => SourceCfg::Dataset(p.clone()),
        (None, Some(p), None) => SourceCfg::Dataset(p.clone()),
        (None, None, Some(t)) => SourceCfg::Target(t.clone()),
        (None, Some(_), Some(_)) => {
            return Err(CliError::config(
                "config sets both [target] and dataset; pick one endpoint source",
            ));
        }
        (None, None, None) => {
            return Err(CliError::config(
                "no endpoint source: set [target] or dataset in the config, or pass --dataset",
            ));
        }
    };

    let loss = args.loss.or(file.loss).unwrap_or(LossKind::Vfm);
    let mut adam = file.adam.unwrap_or_default();
    if let Some(lr) = args.lr {
        adam.lr = lr;
    }

    let mut head = match (&file.head, &args.resume) {
        (Some(h), _) => h.clone(),
        // A bare --resume takes its architecture from the checkpoint.
        (None, Some(path)) => {
            let (_, header) = load_checkpoint(path)?;
            match header.architecture {
                ArchSpec::Mlp { config, .. } => HeadCfg::Mlp(config),
                ArchSpec::Equivariant { config, .. } => HeadCfg::Equivariant(config),
            }
        }
        (None, None) => {
            return Err(CliError::config(
                "no network architecture: set [head] in the config",
            ));
        }
    };

    // The loss dictates whether the head carries a control pathway. The
    // conditioned objective cannot be optimized without labels, and a control
    // pathway trained on the plain objective would never see a label, so both
    // mismatches are resolved here — one fatally, one with a warning.
    let probe = probe_source(&source)?;
    match loss {
        LossKind::ControlledVfm => {
            if !probe.labeled {
                return Err(CliError::config(
                    "controlled-vfm needs labeled endpoints, but the source carries no labels",
                ));
            }
            let label_missing = match &head {
                HeadCfg::Mlp(c) => c.label.is_none(),
                HeadCfg::Equivariant(c) => c.label.is_none(),
            };
            if label_missing {
                let embed = Some(vfm_core::heads::LabelEmbedding::default());
                match &mut head {
                    HeadCfg::Mlp(c) => c.label = embed,
                    HeadCfg::Equivariant(c) => c.label = embed,
                }
            }
        }
        LossKind::Vfm => {
            if probe.labeled {
                eprintln!("warning: endpoint labels present but loss is vfm; labels ignored");
            }
            let had_label = match &mut head {
                HeadCfg::Mlp(c) => c.label.take().is_some(),
                HeadCfg::Equivariant(c) => c.label.take().is_some(),
            };
            if had_label {
                eprintln!(
                    "warning: [head] declares a control pathway but loss is vfm; pathway dropped"
                );
            }
        }
    }

    Ok(TrainResolved {
        loss,
        seed: args.seed.or(file.seed).unwrap_or(0),
        steps: args.steps.or(file.steps).unwrap_or(2000),
        batch: args.batch.or(file.batch).unwrap_or(256),
        adam,
        grad_clip: args.grad_clip.or(file.grad_clip),
        schedule: file.schedule.unwrap_or_default(),
        velocity: file.velocity.unwrap_or_default(),
        prior: file.prior.unwrap_or_default(),
        label_dropout: args.label_dropout.or(file.label_dropout).unwrap_or(0.1),
        eval_every: args.eval_every.or(file.eval_every).unwrap_or(50),
        source,
        head: head.clone(),
        out: args
            .out
            .clone()
            .or(file.out)
            .ok_or_else(|| CliError::config("no checkpoint path: pass --out or set out"))?,
        metrics: args
            .metrics
            .clone()
            .or(file.metrics)
            .ok_or_else(|| CliError::config("no metrics path: pass --metrics or set metrics"))?,
        resume: args.resume.clone(),
    })
}

fn arch_of(head: &HeadCfg, space: vfm_core::path::SpaceSpec) -> ArchSpec {
    match head {
        HeadCfg::Mlp(config) => ArchSpec::Mlp { space, config: config.clone() },
        HeadCfg::Equivariant(config) => ArchSpec::Equivariant { space, config: config.clone() },
    }
}

pub fn run(
    resolved: &TrainResolved,
    config_path: Option<&Path>,
    manifest_path: Option<&Path>,
) -> Result<()> {
    if resolved.batch == 0 {
        return Err(CliError::config("batch must be positive"));
    }
    if resolved.eval_every == 0 {
        return Err(CliError::config("eval_every must be positive"));
    }
    if !(0.0..=1.0).contains(&resolved.label_dropout) {
        return Err(CliError::config("label_dropout must lie in [0, 1]"));
    }

    let probe = probe_source(&resolved.source)?;
    let arch = arch_of(&resolved.head, probe.space.clone());

    // Build or restore the network.
    let (mut head, start_step) = match &resolved.resume {
        Some(path) => {
            let (head, header) = load_checkpoint(path)?;
            if header.architecture != arch {
                return Err(CliError::config(format!(
                    "resume checkpoint {} was trained with a different architecture or space",
                    path.display()
                )));
            }
            if header.train_step > resolved.steps {
                return Err(CliError::config(format!(
                    "resume checkpoint is already at step {}, past steps = {}",
                    header.train_step, resolved.steps
                )));
            }
            (head, header.train_step)
        }
        None => (arch.build(resolved.seed), 0),
    };

    let cfg = TrainConfig {
        steps: resolved.steps,
        batch: resolved.batch,
        adam: resolved.adam.build(),
        grad_clip: resolved.grad_clip,
        schedule: resolved.schedule,
        velocity: resolved.velocity.build()?,
        prior: resolved.prior,
        label_dropout: resolved.label_dropout,
    };
    let source = match (&probe.target, &probe.dataset) {
        (Some(t), _) => EndpointSource::Target(t),
        (_, Some(ds)) => {
            EndpointSource::table(ds.header.space.clone(), &ds.states, &ds.labels)
        }
        _ => unreachable!("probe always carries one source"),
    };

    let hash = artifact_hash(resolved, TRAIN_LOCATION_KEYS)?;
    let mut manifest = ManifestWriter::begin(
        "train",
        config_path,
        resolved.seed,
        to_table(resolved)?,
        &resolved.out,
        manifest_path,
    );

    // Metrics stream: a row every `eval_every` steps plus the final step.
    let mut metrics = MetricsLog::create(&resolved.metrics)?;
    let conditioned = head.conditioned();
    let started = Instant::now();
    let mut last_loss = f64::NAN;
    let mut failed_step = None;

    for step in start_step..resolved.steps {
        let mut rng = stream_rng(resolved.seed, STREAM_DATA_BASE + step);
        let (batch, ts) = sample_batch(&source, &cfg, conditioned, &mut rng);
        let record = train_step(&mut head, &batch, &ts, &cfg, step);
        if !record.applied {
            failed_step = Some(step);
            break;
        }
        last_loss = record.loss;
        if step % resolved.eval_every == 0 || step + 1 == resolved.steps {
            metrics.row(step, record.loss, record.grad_norm, started.elapsed().as_secs_f64())?;
        }
    }
    metrics.finish()?;
    manifest.add_output(&resolved.metrics);

    // The checkpoint is written even on abort: a skipped update leaves
    // parameters and optimizer state at their last good values, so the
    // artifact is the best state the run reached.
    let reached = failed_step.unwrap_or(resolved.steps);
    let embedded = content_table(resolved, TRAIN_LOCATION_KEYS)?;
    save_checkpoint(&resolved.out, &head, resolved.seed, &hash, reached, embedded)?;
    manifest.add_output(&resolved.out);

    manifest.note("steps_run", (reached - start_step) as i64);
    manifest.note("start_step", start_step as i64);
    manifest.note("final_loss", last_loss);
    manifest.note("aborted", failed_step.is_some());
    let manifest_file = manifest.finish()?;

    if let Some(step) = failed_step {
        return Err(CliError::data(format!(
            "non-finite loss or gradient at step {step}; update skipped and run aborted, \
             checkpoint {} retains the last good parameters",
            resolved.out.display()
        )));
    }
    eprintln!(
        "trained {} steps (final loss {:.4}) -> {} (manifest {})",
        reached - start_step,
        last_loss,
        resolved.out.display(),
        manifest_file.display()
    );
    Ok(())
}

/// Incremental `step,loss,grad_norm,seconds` writer. Values use shortest
/// round-trip formatting so identical runs produce identical text; the
/// seconds column is wall time and is the one field reruns may not reproduce.
struct MetricsLog {
    file: std::io::BufWriter<std::fs::File>,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<MetricsLog> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "step,loss,grad_norm,seconds")?;
        Ok(MetricsLog { file })
    }

    fn row(&mut self, step: u64, loss: f64, grad_norm: f64, seconds: f64) -> Result<()> {
        writeln!(
            self.file,
            "{step},{},{},{seconds:.3}",
            fmt_f64(loss),
            fmt_f64(grad_norm)
        )?;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}
