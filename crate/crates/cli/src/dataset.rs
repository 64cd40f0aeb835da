//! Dataset files: endpoint draws from an analytic target, materialized so
//! training, evaluation, and reruns can share one frozen sample.
//!
//! Layout is the common envelope (`vfm-dataset` magic): a TOML header
//! describing the generating target, then `n` rows of `total_dim` values in
//! row-major order, followed by `n` label values when the target carries
//! labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use vfm_core::path::{SpaceSpec, State};
use vfm_core::training::data::Target;
use vfm_core::training::{stream_rng, STREAM_DATA_BASE};

use crate::error::{CliError, Result};
use crate::formats::{read_envelope, write_envelope, MAGIC_DATASET};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub seed: u64,
    pub n: usize,
    pub labeled: bool,
    pub config_hash: String,
    pub target: Target,
    pub space: SpaceSpec,
}

#[derive(Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub states: Vec<State>,
    pub labels: Vec<Option<f64>>,
}

/// Draw `n` endpoints from the target. All draws come from the data stream
/// of `seed`, so the same `(target, n, seed)` always yields the same bytes.
pub fn generate(target: &Target, n: usize, seed: u64) -> (Vec<State>, Vec<Option<f64>>) {
    let mut rng = stream_rng(seed, STREAM_DATA_BASE);
    let mut states = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, y) = target.sample(&mut rng);
        states.push(x);
        labels.push(y);
    }
    (states, labels)
}

pub fn save_dataset(
    path: &Path,
    header: &DatasetHeader,
    states: &[State],
    labels: &[Option<f64>],
) -> Result<()> {
    let dim = header.space.total_dim();
    let mut floats = Vec::with_capacity(states.len() * dim + labels.len());
    for s in states {
        debug_assert_eq!(s.values.len(), dim);
        floats.extend_from_slice(&s.values);
    }
    if header.labeled {
        for l in labels {
            floats.push(l.ok_or_else(|| {
                CliError::data("dataset marked labeled but a row has no label")
            })?);
        }
    }
    let text = toml::to_string(header)
        .map_err(|e| CliError::data(format!("serializing dataset header: {e}")))?;
    write_envelope(path, MAGIC_DATASET, &text, &floats)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let envelope = read_envelope(path, MAGIC_DATASET)?;
    let header: DatasetHeader = crate::formats::parse_header(path, &envelope.header)?;
    let dim = header.space.total_dim();
    let expected = header.n * dim + if header.labeled { header.n } else { 0 };
    if envelope.floats.len() != expected {
        return Err(CliError::data(format!(
            "{}: header declares {} values, payload has {}",
            path.display(),
            expected,
            envelope.floats.len()
        )));
    }
    let mut states = Vec::with_capacity(header.n);
    for row in 0..header.n {
        let values = envelope.floats[row * dim..(row + 1) * dim].to_vec();
        states.push(State::new(values, 1.0));
    }
    let labels: Vec<Option<f64>> = if header.labeled {
        envelope.floats[header.n * dim..].iter().map(|&v| Some(v)).collect()
    } else {
        vec![None; header.n]
    };
    Ok(Dataset { header, states, labels })
}
