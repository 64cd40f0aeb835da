//! Configuration resolution.
//!
//! Every command resolves three layers — built-in defaults, an optional
//! TOML file, and command-line flags, in rising precedence — into a fully
//! concrete `*Resolved` struct. The resolved struct is what runs, what the
//! manifest snapshots, and what `rerun` replays; its canonical TOML
//! serialization is hashed into the `config_hash` that artifacts carry.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vfm_core::diff::AdamConfig;
use vfm_core::heads::{EquivariantConfig, MlpConfig, NoiseSchedule};
use vfm_core::metrics::Property;
use vfm_core::path::{Prior, VelocityKind};
use vfm_core::sampling::Scheme;
use vfm_core::training::data::Target;
use vfm_core::VelocitySpec;

use crate::checkpoint::ArchSpec;
use crate::error::{CliError, Result};

/// Which objective the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[clap(rename_all = "kebab-case")]
pub enum LossKind {
    /// Posterior likelihood without any control input.
    Vfm,
    /// Label-conditioned posterior likelihood.
    ControlledVfm,
}

/// Mirror of the optimizer settings with TOML defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamCfg {
    fn default() -> Self {
        let d = AdamConfig::default();
        AdamCfg { lr: d.lr, beta1: d.beta1, beta2: d.beta2, eps: d.eps }
    }
}

impl AdamCfg {
    pub fn build(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

fn default_velocity_kind() -> VelocityKind {
    VelocityKind::OptimalTransport
}

/// Velocity family plus its time clamp, validated before use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityCfg {
    #[serde(default = "default_velocity_kind")]
    pub kind: VelocityKind,
    pub t_clamp: f64,
}

impl VelocityCfg {
    pub fn build(&self) -> Result<VelocitySpec> {
        if !(self.t_clamp > 0.0 && self.t_clamp < 0.5) {
            return Err(CliError::config(format!(
                "velocity.t_clamp must lie in (0, 0.5), got {}",
                self.t_clamp
            )));
        }
        Ok(VelocitySpec::new(self.t_clamp))
    }
}

/// Training-time default: a wider clamp than the library default keeps the
/// late-time loss weights bounded at desk scale.
impl Default for VelocityCfg {
    fn default() -> Self {
        VelocityCfg { kind: VelocityKind::OptimalTransport, t_clamp: 0.01 }
    }
}

/// Network architecture selector for config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadCfg {
    Mlp(MlpConfig),
    Equivariant(EquivariantConfig),
}

/// Where training endpoints come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceCfg {
    /// Analytic target sampled on the fly.
    Target(Target),
    /// Materialized dataset file, drawn uniformly with replacement.
    Dataset(PathBuf),
}

// ---------------------------------------------------------------------------
// generate-data

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateFile {
    pub target: Option<Target>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateResolved {
    pub target: Target,
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub loss: Option<LossKind>,
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub batch: Option<usize>,
    pub adam: Option<AdamCfg>,
    pub grad_clip: Option<f64>,
    pub schedule: Option<NoiseSchedule>,
    pub velocity: Option<VelocityCfg>,
    pub prior: Option<Prior>,
    pub label_dropout: Option<f64>,
    pub eval_every: Option<u64>,
    pub target: Option<Target>,
    pub dataset: Option<PathBuf>,
    pub head: Option<HeadCfg>,
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResolved {
    pub loss: LossKind,
    pub seed: u64,
    pub steps: u64,
    pub batch: usize,
    pub adam: AdamCfg,
    pub grad_clip: Option<f64>,
    pub schedule: NoiseSchedule,
    pub velocity: VelocityCfg,
    pub prior: Prior,
    pub label_dropout: f64,
    /// Metrics-row cadence in steps.
    pub eval_every: u64,
    pub source: SourceCfg,
    pub head: HeadCfg,
    pub out: PathBuf,
    pub metrics: PathBuf,
    pub resume: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// sample

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum ModeKind {
    Unconditional,
    Conditioned,
    Guided,
}

/// Analytic likelihood settings for guided sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuideCfg {
    pub property: Property,
    pub sigma_y: f64,
    pub target: f64,
}

/// Property names addressable from the command line; likelihoods needing
/// parameters (reference centers) are config-file-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[clap(rename_all = "kebab-case")]
pub enum GuideName {
    Circumradius,
    MeanPairwiseDistance,
    CoordinateSum,
}

impl GuideName {
    pub fn property(self) -> Property {
        match self {
            GuideName::Circumradius => Property::Circumradius,
            GuideName::MeanPairwiseDistance => Property::MeanPairwiseDistance,
            GuideName::CoordinateSum => Property::CoordinateSum,
        }
    }
}

/// Integrator selector for the command line, mapped onto the library enum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[clap(rename_all = "snake_case")]
pub enum SchemeArg {
    Euler,
    Rk4,
}

impl SchemeArg {
    pub fn scheme(self) -> Scheme {
        match self {
            SchemeArg::Euler => Scheme::Euler,
            SchemeArg::Rk4 => Scheme::Rk4,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFile {
    pub checkpoint: Option<PathBuf>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<ModeKind>,
    pub y: Option<f64>,
    pub nfe: Option<u64>,
    pub scheme: Option<Scheme>,
    pub velocity: Option<VelocityCfg>,
    pub schedule: Option<NoiseSchedule>,
    pub prior: Option<Prior>,
    pub guide: Option<GuideCfg>,
    pub inner_steps: Option<usize>,
    pub damping: Option<f64>,
    pub divergence_cap: Option<f64>,
    pub residual_tol: Option<f64>,
    pub property: Option<Property>,
    pub out: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleResolved {
    pub checkpoint: PathBuf,
    pub n: usize,
    pub seed: u64,
    pub mode: ModeKind,
    pub y: Option<f64>,
    /// Velocity evaluations per chain; the scheme's per-step cost divides
    /// this into grid steps.
    pub nfe: u64,
    pub scheme: Scheme,
    pub velocity: VelocityCfg,
    pub schedule: NoiseSchedule,
    pub prior: Prior,
    pub guide: Option<GuideCfg>,
    pub inner_steps: usize,
    pub damping: f64,
    pub divergence_cap: f64,
    pub residual_tol: f64,
    pub property: Option<Property>,
    pub out: PathBuf,
    pub trajectories: Option<PathBuf>,
    pub workers: usize,
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricCfg {
    /// Sliced 2-Wasserstein over the continuous block.
    SlicedW2 { projections: usize },
    /// Per-block and worst-case total variation of decoded categoricals
    /// against the reference target's analytic marginals.
    MarginalTv,
    /// Mean absolute deviation of a property from a target value.
    PropertyMae {
        y_target: f64,
        property: Option<Property>,
    },
    /// Rule-based typed-polygon validity.
    ValidityRate { tau: f64 },
    /// Fraction of rows whose decoded categorical tuple already appeared;
    /// informational only.
    DuplicateFraction,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub metrics: Vec<MetricCfg>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResolved {
    /// Reference dataset file.
    pub a: PathBuf,
    /// Dataset file or samples CSV under evaluation.
    pub b: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
    pub metrics: Vec<MetricCfg>,
}

// ---------------------------------------------------------------------------
// equivariance-audit

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum GroupKind {
    RotatePermute,
    RotatePermuteTranslate,
}

/// The audited network: a trained artifact or a deterministic perturbed
/// initialization (fresh weights are trivially equivariant, so audits need
/// non-trivial ones even without training).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "from", rename_all = "snake_case")]
pub enum HeadSource {
    Checkpoint { path: PathBuf },
    Init { architecture: ArchSpec, init_seed: u64, perturb: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditTolerances {
    /// Conditional-velocity identity (exact algebra).
    pub bi_equivariance: f64,
    /// Posterior-expectation equivariance of the head.
    pub expectation: f64,
    /// Induced velocity-field equivariance of the head.
    pub velocity: f64,
    /// Whole-trajectory commutation over the integration grid.
    pub trajectory: f64,
    /// Gap between invariant statistics of the two final-state populations.
    pub statistic: f64,
    /// Centroid residual of centered priors.
    pub com: f64,
    /// Monte Carlo moment gap of the prior under the group.
    pub moment: f64,
}

impl Default for AuditTolerances {
    fn default() -> Self {
        AuditTolerances {
            bi_equivariance: 1e-12,
            expectation: 1e-9,
            velocity: 1e-9,
            trajectory: 1e-8,
            statistic: 1e-6,
            com: 1e-12,
            moment: 0.3,
        }
    }
}

/// Expected verdicts, letting negative-control configs assert that an audit
/// fails. The command exits non-zero when an outcome differs from its
/// expectation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditExpectations {
    pub prior: bool,
    pub bi_equivariance: bool,
    pub model: bool,
    pub marginal: bool,
}

impl Default for AuditExpectations {
    fn default() -> Self {
        AuditExpectations { prior: true, bi_equivariance: true, model: true, marginal: true }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditFile {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub prior_draws: Option<usize>,
    pub integrator_steps: Option<usize>,
    pub marginal_trials: Option<usize>,
    pub group: Option<GroupKind>,
    pub checkpoint: Option<PathBuf>,
    pub architecture: Option<ArchSpec>,
    pub init_seed: Option<u64>,
    pub perturb: Option<f64>,
    pub prior: Option<Prior>,
    pub velocity: Option<VelocityCfg>,
    pub tolerances: Option<AuditTolerances>,
    pub expect: Option<AuditExpectations>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditResolved {
    pub seed: u64,
    pub trials: usize,
    pub prior_draws: usize,
    pub integrator_steps: usize,
    pub marginal_trials: usize,
    pub group: GroupKind,
    pub head: HeadSource,
    pub prior: Prior,
    pub velocity: VelocityCfg,
    pub tolerances: AuditTolerances,
    pub expect: AuditExpectations,
    pub out: PathBuf,
}

// ---------------------------------------------------------------------------
// shared helpers

/// Load a TOML config file into the per-command file struct.
pub fn load_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))
}

/// Canonical hash of a resolved config, carried by artifacts so outputs can
/// be traced to the exact settings that made them.
pub fn config_hash<T: Serialize>(resolved: &T) -> Result<String> {
    let text = toml::to_string(resolved)
        .map_err(|e| CliError::data(format!("serializing resolved config: {e}")))?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(format!("sha256:{}", hex::encode(digest)))
}

/// Hash of the settings that determine an artifact's *content*, with
/// location-only keys stripped: writing the same run to a different path (or
/// with a different worker count) must yield byte-identical artifacts.
pub fn artifact_hash<T: Serialize>(resolved: &T, location_keys: &[&str]) -> Result<String> {
    Ok(config_hash(&content_table(resolved, location_keys)?)?)
}

/// The resolved config as a table with location-only keys removed — what
/// artifact hashes and checkpoint-embedded settings are built from.
pub fn content_table<T: Serialize>(resolved: &T, location_keys: &[&str]) -> Result<toml::Table> {
    let mut table = to_table(resolved)?;
    for key in location_keys {
        table.remove(*key);
    }
    Ok(table)
}

/// Serialize a resolved config into a TOML table for the manifest snapshot.
pub fn to_table<T: Serialize>(resolved: &T) -> Result<toml::Table> {
    let text = toml::to_string(resolved)
        .map_err(|e| CliError::data(format!("serializing resolved config: {e}")))?;
    toml::from_str(&text).map_err(|e| CliError::data(format!("round-tripping config: {e}")))
}

/// Deserialize a manifest snapshot back into a resolved config.
pub fn from_table<T: serde::de::DeserializeOwned>(table: &toml::Table) -> Result<T> {
    let text = toml::to_string(table)
        .map_err(|e| CliError::data(format!("serializing manifest snapshot: {e}")))?;
    toml::from_str(&text)
        .map_err(|e| CliError::data(format!("manifest snapshot does not parse: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_file_parses_the_documented_keys() {
        let text = r#"
            loss = "controlled-vfm"
            seed = 9
            steps = 120
            batch = 32
            grad_clip = 1.5
            label_dropout = 0.2
            eval_every = 10
            out = "model.ckpt"
            metrics = "metrics.csv"

            [adam]
            lr = 2e-3

            [schedule]
            sigma_base = 0.9

            [velocity]
            t_clamp = 0.02

            [prior]
            continuous = "zero_com"
            categorical = "vertex_uniform"

            [target]
            family = "ring"
            n_components = 8
            radius = 3.0
            sigma = 0.25

            [head]
            kind = "mlp"
            hidden = [16, 16]
            [head.time]
            n_freqs = 4
        "#;
        let file: TrainFile = toml::from_str(text).unwrap();
        assert_eq!(file.loss, Some(LossKind::ControlledVfm));
        assert_eq!(file.adam.unwrap().lr, 2e-3);
        assert_eq!(file.adam.unwrap().beta1, 0.9, "unset keys keep defaults");
        assert!(matches!(file.head, Some(HeadCfg::Mlp(_))));
        assert!(matches!(file.target, Some(Target::Ring(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<TrainFile>("stepz = 5").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn resolved_round_trips_through_manifest_tables() {
        let resolved = TrainResolved {
            loss: LossKind::Vfm,
            seed: 3,
            steps: 10,
            batch: 4,
            adam: AdamCfg::default(),
            grad_clip: None,
            schedule: NoiseSchedule::default(),
            velocity: VelocityCfg::default(),
            prior: Prior::default(),
            label_dropout: 0.1,
            eval_every: 5,
            source: SourceCfg::Target(Target::Ring(Default::default())),
            head: HeadCfg::Mlp(MlpConfig {
                hidden: vec![8],
                time: Default::default(),
                label: None,
            }),
            out: "m.ckpt".into(),
            metrics: "m.csv".into(),
            resume: None,
        };
        let table = to_table(&resolved).unwrap();
        let back: TrainResolved = from_table(&table).unwrap();
        assert_eq!(config_hash(&back).unwrap(), config_hash(&resolved).unwrap());
    }

    #[test]
    fn velocity_clamp_is_validated() {
        assert!(VelocityCfg { kind: default_velocity_kind(), t_clamp: 0.7 }
            .build()
            .is_err());
        assert!(VelocityCfg { kind: default_velocity_kind(), t_clamp: 0.01 }
            .build()
            .is_ok());
    }
}
