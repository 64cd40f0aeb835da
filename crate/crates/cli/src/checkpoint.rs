//! Checkpoint files: a full snapshot of a head mid-training.
//!
//! The header records the architecture (enough to rebuild the network
//! shape-for-shape), the run's seed and resolved-config hash, both step
//! counters, and a manifest of every tensor in payload order. The payload
//! holds parameter values followed by both Adam moment buffers, so a
//! resumed run continues the optimizer trajectory bit-for-bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use vfm_core::diff::{ParamStore, Tensor};
use vfm_core::heads::{EquivariantConfig, EquivariantHead, Head, MlpConfig, MlpHead};
use vfm_core::training::{stream_rng, STREAM_INIT};
use vfm_core::SpaceSpec;

use crate::error::{CliError, Result};
use crate::formats::{self, MAGIC_CHECKPOINT};

/// Network family plus everything needed to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    Mlp { space: SpaceSpec, config: MlpConfig },
    Equivariant { space: SpaceSpec, config: EquivariantConfig },
}

impl ArchSpec {
    pub fn of(head: &Head) -> ArchSpec {
        match head {
            Head::Mlp(h) => ArchSpec::Mlp {
                space: h.space().clone(),
                config: h.config().clone(),
            },
            Head::Equivariant(h) => ArchSpec::Equivariant {
                space: h.space().clone(),
                config: h.config().clone(),
            },
        }
    }

    /// Build a head of this architecture with freshly initialized weights.
    pub fn build(&self, init_seed: u64) -> Head {
        let mut rng = stream_rng(init_seed, STREAM_INIT);
        match self {
            ArchSpec::Mlp { space, config } => {
                Head::Mlp(MlpHead::new(space.clone(), config.clone(), &mut rng))
            }
            ArchSpec::Equivariant { space, config } => {
                Head::Equivariant(EquivariantHead::new(space.clone(), config.clone(), &mut rng))
            }
        }
    }

    pub fn space(&self) -> &SpaceSpec {
        match self {
            ArchSpec::Mlp { space, .. } => space,
            ArchSpec::Equivariant { space, .. } => space,
        }
    }

    pub fn conditioned(&self) -> bool {
        match self {
            ArchSpec::Mlp { config, .. } => config.label.is_some(),
            ArchSpec::Equivariant { config, .. } => config.label.is_some(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub seed: u64,
    pub config_hash: String,
    /// Completed training steps; a resume replays from here.
    pub train_step: u64,
    /// Optimizer step counter (applied updates only).
    pub optimizer_steps: u64,
    pub architecture: ArchSpec,
    /// The resolved training configuration that produced this checkpoint,
    /// kept so sampling can default to the training-time path settings.
    pub train_config: toml::Table,
    /// Payload layout: tensors appear in exactly this order.
    pub tensors: Vec<TensorMeta>,
}

pub fn save_checkpoint(
    path: &Path,
    head: &Head,
    seed: u64,
    config_hash: &str,
    train_step: u64,
    train_config: toml::Table,
) -> Result<()> {
    let export = head.params().export();
    let tensors: Vec<TensorMeta> = export
        .iter()
        .map(|(name, t)| TensorMeta { name: name.clone(), rows: t.rows, cols: t.cols })
        .collect();
    let header = CheckpointHeader {
        seed,
        config_hash: config_hash.to_string(),
        train_step,
        optimizer_steps: head.params().step_count(),
        architecture: ArchSpec::of(head),
        train_config,
        tensors,
    };
    let header_text = toml::to_string(&header)
        .map_err(|e| CliError::data(format!("serializing checkpoint header: {e}")))?;
    let mut floats = Vec::new();
    for (_, t) in &export {
        floats.extend_from_slice(&t.data);
    }
    formats::write_envelope(path, MAGIC_CHECKPOINT, &header_text, &floats)
}

pub fn load_checkpoint(path: &Path) -> Result<(Head, CheckpointHeader)> {
    let env = formats::read_envelope(path, MAGIC_CHECKPOINT)?;
    let header: CheckpointHeader = formats::parse_header(path, &env.header)?;

    let expected: usize = header.tensors.iter().map(|m| m.rows * m.cols).sum();
    if env.floats.len() != expected {
        return Err(CliError::data(format!(
            "{}: payload holds {} floats but the header declares {expected}",
            path.display(),
            env.floats.len()
        )));
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for meta in &header.tensors {
        let len = meta.rows * meta.cols;
        let mut t = Tensor::zeros(meta.rows, meta.cols);
        t.data.copy_from_slice(&env.floats[offset..offset + len]);
        offset += len;
        tensors.push((meta.name.clone(), t));
    }
    let store = ParamStore::import(&tensors, header.optimizer_steps)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;

    // Rebuild the architecture and verify the stored tensors are exactly the
    // ones it would create, so a stale file cannot masquerade as another
    // network.
    let mut head = header.architecture.build(0);
    let fresh: Vec<(String, (usize, usize))> = head
        .params()
        .export()
        .iter()
        .map(|(n, t)| (n.clone(), (t.rows, t.cols)))
        .collect();
    let loaded: Vec<(String, (usize, usize))> = store
        .export()
        .iter()
        .map(|(n, t)| (n.clone(), (t.rows, t.cols)))
        .collect();
    if fresh != loaded {
        return Err(CliError::data(format!(
            "{}: stored tensors do not match the declared architecture",
            path.display()
        )));
    }
    *head.params_mut() = store;
    Ok((head, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vfm_core::heads::TimeEmbedding;
    use vfm_core::symmetry::perturb_head;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("vfm-checkpoint-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(format!("{name}-{}", std::process::id()))
    }

    fn demo_head() -> Head {
        let arch = ArchSpec::Mlp {
            space: SpaceSpec::continuous(2),
            config: MlpConfig {
                hidden: vec![8, 8],
                time: TimeEmbedding { n_freqs: 2 },
                label: None,
            },
        };
        let mut head = arch.build(3);
        perturb_head(&mut head, 0.1);
        head
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let head = demo_head();
        let path = tmp("roundtrip.ckpt");
        save_checkpoint(&path, &head, 3, "sha256:abc", 17, toml::Table::new()).unwrap();
        let (loaded, header) = load_checkpoint(&path).unwrap();
        assert_eq!(header.train_step, 17);
        assert_eq!(header.seed, 3);
        assert_eq!(header.config_hash, "sha256:abc");
        for ((an, at), (bn, bt)) in head.params().export().iter().zip(loaded.params().export()) {
            assert_eq!(an, &bn);
            for (x, y) in at.data.iter().zip(&bt.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn same_head_saved_twice_gives_identical_bytes() {
        let head = demo_head();
        let (p1, p2) = (tmp("bytes1.ckpt"), tmp("bytes2.ckpt"));
        save_checkpoint(&p1, &head, 3, "h", 0, toml::Table::new()).unwrap();
        save_checkpoint(&p2, &head, 3, "h", 0, toml::Table::new()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let head = demo_head();
        let path = tmp("mismatch.ckpt");
        save_checkpoint(&path, &head, 3, "h", 0, toml::Table::new()).unwrap();

        // Rewrite the header to claim a different hidden width while keeping
        // the payload and tensor manifest unchanged.
        let env = formats::read_envelope(&path, MAGIC_CHECKPOINT).unwrap();
        let mut header: CheckpointHeader = toml::from_str(&env.header).unwrap();
        if let ArchSpec::Mlp { config, .. } = &mut header.architecture {
            config.hidden = vec![9, 8];
        }
        formats::write_envelope(
            &path,
            MAGIC_CHECKPOINT,
            &toml::to_string(&header).unwrap(),
            &env.floats,
        )
        .unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(
            err.to_string().contains("architecture"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn short_payload_is_rejected() {
        let head = demo_head();
        let path = tmp("short.ckpt");
        save_checkpoint(&path, &head, 3, "h", 0, toml::Table::new()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("declares"), "unexpected error: {err}");
    }
}
