//! Trajectory dumps: full integration paths for every chain of a sampling
//! run, stored as raw frames behind a structured-text header (`vfm-trajectory`
//! magic). Payload order is chain-major: all frames of chain 0, then chain 1,
//! each frame being `dim` values at one grid time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use vfm_core::sampling::{Scheme, Trajectory};

use crate::error::{CliError, Result};
use crate::formats::{read_envelope, write_envelope, MAGIC_TRAJECTORY};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub seed: u64,
    pub n_chains: usize,
    /// States per chain: integration steps plus the initial frame.
    pub frames: usize,
    pub dim: usize,
    pub steps: usize,
    pub scheme: Scheme,
    pub mode: String,
    pub config_hash: String,
}

pub fn save_trajectories(
    path: &Path,
    header: &TrajectoryHeader,
    chains: &[&Trajectory],
) -> Result<()> {
    if chains.len() != header.n_chains {
        return Err(CliError::data(format!(
            "trajectory header declares {} chains, got {}",
            header.n_chains,
            chains.len()
        )));
    }
    let mut floats = Vec::with_capacity(header.n_chains * header.frames * header.dim);
    for t in chains {
        if t.states.len() != header.frames {
            return Err(CliError::data(format!(
                "trajectory header declares {} frames per chain, a chain has {}",
                header.frames,
                t.states.len()
            )));
        }
        for s in &t.states {
            floats.extend_from_slice(&s.values);
        }
    }
    let text = toml::to_string(header)
        .map_err(|e| CliError::data(format!("serializing trajectory header: {e}")))?;
    write_envelope(path, MAGIC_TRAJECTORY, &text, &floats)
}

/// Frames of one stored chain, flattened per frame.
pub struct StoredTrajectories {
    pub header: TrajectoryHeader,
    floats: Vec<f64>,
}

impl StoredTrajectories {
    pub fn frame(&self, chain: usize, frame: usize) -> &[f64] {
        let h = &self.header;
        let base = (chain * h.frames + frame) * h.dim;
        &self.floats[base..base + h.dim]
    }
}

pub fn load_trajectories(path: &Path) -> Result<StoredTrajectories> {
    let envelope = read_envelope(path, MAGIC_TRAJECTORY)?;
    let header: TrajectoryHeader = crate::formats::parse_header(path, &envelope.header)?;
    let expected = header.n_chains * header.frames * header.dim;
    if envelope.floats.len() != expected {
        return Err(CliError::data(format!(
            "{}: header declares {} values, payload has {}",
            path.display(),
            expected,
            envelope.floats.len()
        )));
    }
    Ok(StoredTrajectories { header, floats: envelope.floats })
}
