//! `equivariance-audit`: check the three hypotheses behind the invariant
//! marginal path — invariant source distribution, equivariant conditional
//! velocity, equivariant posterior expectation — plus the conclusion itself
//! via whole-trajectory commutation, and write a structured report.
//!
//! Each section records its residuals, tolerance, verdict, and expected
//! verdict. Negative-control configs expect failures; the command exits
//! non-zero only when an outcome differs from its expectation.

use std::path::{Path, PathBuf};

use serde::Serialize;

use vfm_core::heads::Head;
use vfm_core::sampling::{IntegratorConfig, Scheme};
use vfm_core::symmetry::{
    audit_bi_equivariance, audit_marginal_invariance, audit_model_equivariance,
    audit_prior_invariance, perturb_head, GroupSampler,
};

use crate::checkpoint::load_checkpoint;
use crate::config::{
    artifact_hash, load_file, to_table, AuditFile, AuditResolved, GroupKind, HeadSource,
};
use crate::error::{CliError, Result};
use crate::formats::write_atomic;
use crate::manifest::ManifestWriter;

#[derive(Debug, clap::Args)]
pub struct AuditArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Audit the network stored in this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trials for the velocity and posterior audits.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Group orbit to explore.
    #[arg(long, value_enum)]
    pub group: Option<GroupKind>,
    /// Report output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted for symmetry with `sample`; audits always run serially.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Manifest path (default: beside the report).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn resolve(args: &AuditArgs) -> Result<AuditResolved> {
    let file: AuditFile = match &args.config {
        Some(p) => load_file(p)?,
        None => AuditFile::default(),
    };
    let seed = args.seed.or(file.seed).unwrap_or(0);

    let checkpoint = args.checkpoint.clone().or(file.checkpoint);
    let head = match (checkpoint, file.architecture) {
        (Some(_), Some(_)) => {
            return Err(CliError::config(
                "config names both a checkpoint and an architecture; pick one",
            ));
        }
        (Some(path), None) => HeadSource::Checkpoint { path },
        (None, Some(architecture)) => HeadSource::Init {
            architecture,
            init_seed: file.init_seed.unwrap_or(seed),
            perturb: file.perturb.unwrap_or(0.01),
        },
        (None, None) => {
            return Err(CliError::config(
                "nothing to audit: pass --checkpoint or set [architecture]",
            ));
        }
    };

    // Path settings default to the checkpoint's training-time values.
    let mut velocity = file.velocity;
    let mut prior = file.prior;
    if let HeadSource::Checkpoint { path } = &head {
        let (_, header) = load_checkpoint(path)?;
        velocity = velocity.or_else(|| {
            header.train_config.get("velocity").and_then(|v| v.clone().try_into().ok())
        });
        prior = prior.or_else(|| {
            header.train_config.get("prior").and_then(|v| v.clone().try_into().ok())
        });
    }

    Ok(AuditResolved {
        seed,
        trials: args.trials.or(file.trials).unwrap_or(200),
        prior_draws: file.prior_draws.unwrap_or(10_000),
        integrator_steps: file.integrator_steps.unwrap_or(100),
        marginal_trials: file.marginal_trials.unwrap_or(10),
        group: args.group.or(file.group).unwrap_or(GroupKind::RotatePermute),
        head,
        prior: prior.unwrap_or_default(),
        velocity: velocity.unwrap_or_default(),
        tolerances: file.tolerances.unwrap_or_default(),
        expect: file.expect.unwrap_or_default(),
        out: args
            .out
            .clone()
            .or(file.out)
            .unwrap_or_else(|| PathBuf::from("audit_report.toml")),
    })
}

#[derive(Debug, Serialize)]
struct PriorSection {
    moment_gap: f64,
    moment_tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    com_residual: Option<f64>,
    com_tolerance: f64,
    draws: usize,
    pass: bool,
    expected: bool,
}

#[derive(Debug, Serialize)]
struct BiSection {
    residual: f64,
    tolerance: f64,
    trials: usize,
    pass: bool,
    expected: bool,
}

#[derive(Debug, Serialize)]
struct ModelSection {
    expectation_residual: f64,
    expectation_tolerance: f64,
    velocity_residual: f64,
    velocity_tolerance: f64,
    trials: usize,
    pass: bool,
    expected: bool,
}

#[derive(Debug, Serialize)]
struct MarginalSection {
    trajectory_residual: f64,
    trajectory_tolerance: f64,
    statistic_gap: f64,
    statistic_tolerance: f64,
    trials: usize,
    integrator_steps: usize,
    pass: bool,
    expected: bool,
}

#[derive(Debug, Serialize)]
struct AuditReport {
    /// True when every section's verdict matched its expectation.
    overall_pass: bool,
    config_hash: String,
    hypothesis_1_source_invariance: PriorSection,
    hypothesis_2_conditional_velocity: BiSection,
    hypothesis_3_posterior_equivariance: ModelSection,
    conclusion_marginal_invariance: MarginalSection,
}

fn build_head(source: &HeadSource) -> Result<Head> {
    match source {
        HeadSource::Checkpoint { path } => Ok(load_checkpoint(path)?.0),
        HeadSource::Init { architecture, init_seed, perturb } => {
            let mut head = architecture.build(*init_seed);
            perturb_head(&mut head, *perturb);
            Ok(head)
        }
    }
}

fn verdict(name: &str, pass: bool, expected: bool, detail: String) -> bool {
    let out = if pass { "PASS" } else { "FAIL" };
    let note = if pass == expected { "" } else { "  <-- differs from expectation" };
    println!("{name}: {out} ({detail}){note}");
    pass == expected
}

pub fn run(
    resolved: &AuditResolved,
    config_path: Option<&Path>,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let head = build_head(&resolved.head)?;
    let space = head.space().clone();
    let velocity = resolved.velocity.build()?;
    let sampler = match resolved.group {
        GroupKind::RotatePermute => GroupSampler::RotatePermute,
        GroupKind::RotatePermuteTranslate => GroupSampler::RotatePermuteTranslate,
    };
    let tol = resolved.tolerances;
    let expect = resolved.expect;
    let hash = artifact_hash(resolved, &["out"])?;

    let mut manifest = ManifestWriter::begin(
        "equivariance-audit",
        config_path,
        resolved.seed,
        to_table(resolved)?,
        &resolved.out,
        manifest_path,
    );

    // Hypothesis 1: the source distribution is unchanged by the group.
    let prior_report = audit_prior_invariance(
        &resolved.prior,
        &space,
        &sampler,
        resolved.prior_draws,
        resolved.seed,
    );
    let prior_pass = prior_report.moment_gap <= tol.moment
        && prior_report.com_residual.is_none_or(|r| r <= tol.com);
    let mut all_expected = verdict(
        "hypothesis 1, source invariance",
        prior_pass,
        expect.prior,
        format!(
            "moment gap {:.3e} vs tolerance {:.1e}{}",
            prior_report.moment_gap,
            tol.moment,
            match prior_report.com_residual {
                Some(r) => format!(", centroid residual {r:.3e} vs tolerance {:.1e}", tol.com),
                None => String::new(),
            }
        ),
    );

    // Hypothesis 2: the conditional velocity commutes with the group.
    let bi_residual = audit_bi_equivariance(
        &space,
        &velocity,
        resolved.trials,
        resolved.seed.wrapping_add(1),
    );
    let bi_pass = bi_residual <= tol.bi_equivariance;
    all_expected &= verdict(
        "hypothesis 2, conditional velocity equivariance",
        bi_pass,
        expect.bi_equivariance,
        format!("residual {:.3e} vs tolerance {:.1e}", bi_residual, tol.bi_equivariance),
    );

    // Hypothesis 3: the network's posterior expectation commutes with the
    // group, and so does the velocity field it induces.
    let model_report = audit_model_equivariance(
        &head,
        &velocity,
        sampler,
        resolved.trials,
        resolved.seed.wrapping_add(2),
    )
    .map_err(|e| CliError::data(format!("posterior evaluation failed: {e}")))?;
    let model_pass = model_report.expectation_residual <= tol.expectation
        && model_report.velocity_residual <= tol.velocity;
    all_expected &= verdict(
        "hypothesis 3, posterior expectation equivariance",
        model_pass,
        expect.model,
        format!(
            "expectation residual {:.3e} vs tolerance {:.1e}, velocity residual {:.3e} vs tolerance {:.1e}",
            model_report.expectation_residual,
            tol.expectation,
            model_report.velocity_residual,
            tol.velocity
        ),
    );

    // Conclusion: generated trajectories commute with the group, so the
    // marginal path is invariant.
    let integ = IntegratorConfig { scheme: Scheme::Euler, steps: resolved.integrator_steps };
    let marginal_report = audit_marginal_invariance(
        &head,
        &resolved.prior,
        &velocity,
        &integ,
        resolved.marginal_trials,
        resolved.seed.wrapping_add(3),
    )
    .map_err(|e| CliError::data(format!("trajectory integration failed: {e}")))?;
    let marginal_pass = marginal_report.trajectory_residual <= tol.trajectory
        && marginal_report.statistic_gap <= tol.statistic;
    all_expected &= verdict(
        "conclusion, marginal path invariance",
        marginal_pass,
        expect.marginal,
        format!(
            "trajectory residual {:.3e} vs tolerance {:.1e}, statistic gap {:.3e} vs tolerance {:.1e}",
            marginal_report.trajectory_residual,
            tol.trajectory,
            marginal_report.statistic_gap,
            tol.statistic
        ),
    );

    let report = AuditReport {
        overall_pass: all_expected,
        config_hash: hash,
        hypothesis_1_source_invariance: PriorSection {
            moment_gap: prior_report.moment_gap,
            moment_tolerance: tol.moment,
            com_residual: prior_report.com_residual,
            com_tolerance: tol.com,
            draws: resolved.prior_draws,
            pass: prior_pass,
            expected: expect.prior,
        },
        hypothesis_2_conditional_velocity: BiSection {
            residual: bi_residual,
            tolerance: tol.bi_equivariance,
            trials: resolved.trials,
            pass: bi_pass,
            expected: expect.bi_equivariance,
        },
        hypothesis_3_posterior_equivariance: ModelSection {
            expectation_residual: model_report.expectation_residual,
            expectation_tolerance: tol.expectation,
            velocity_residual: model_report.velocity_residual,
            velocity_tolerance: tol.velocity,
            trials: resolved.trials,
            pass: model_pass,
            expected: expect.model,
        },
        conclusion_marginal_invariance: MarginalSection {
            trajectory_residual: marginal_report.trajectory_residual,
            trajectory_tolerance: tol.trajectory,
            statistic_gap: marginal_report.statistic_gap,
            statistic_tolerance: tol.statistic,
            trials: resolved.marginal_trials,
            integrator_steps: resolved.integrator_steps,
            pass: marginal_pass,
            expected: expect.marginal,
        },
    };
    let text = toml::to_string_pretty(&report)
        .map_err(|e| CliError::data(format!("serializing audit report: {e}")))?;
    write_atomic(&resolved.out, text.as_bytes())?;
    manifest.add_output(&resolved.out);
    manifest.note("overall_pass", all_expected);
    let manifest_file = manifest.finish()?;
    eprintln!("report {} (manifest {})", resolved.out.display(), manifest_file.display());

    if !all_expected {
        return Err(CliError::audit(
            "one or more audit verdicts differ from the configured expectations; see the report",
        ));
    }
    Ok(())
}
