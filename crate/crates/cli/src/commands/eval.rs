//! `eval`: compare a reference dataset against a second dataset or a samples
//! CSV and append metric rows to a results CSV.
//!
//! The reference file (`a`) anchors everything: its space fixes the row
//! layout, and its generating target picks the default metric set when the
//! config names none.

use std::io::Read as _;
use std::path::{Path, PathBuf};

use vfm_core::metrics::{
    marginal_total_variation, property_mae, sliced_w2, validity_rate,
};
use vfm_core::path::{SpaceSpec, State};
use vfm_core::training::data::Target;
use vfm_core::training::stream_rng;

use crate::config::{artifact_hash, load_file, to_table, EvalFile, EvalResolved, MetricCfg};
use crate::dataset::load_dataset;
use crate::error::{CliError, Result};
use crate::formats::{fmt_f64, MAGIC_DATASET};
use crate::manifest::ManifestWriter;

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reference dataset file.
    #[arg(short = 'a', long)]
    pub a: Option<PathBuf>,
    /// Dataset file or samples CSV under evaluation.
    #[arg(short = 'b', long)]
    pub b: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Results CSV; rows are appended so many runs can share one file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Manifest path (default: beside the results CSV).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn resolve(args: &EvalArgs) -> Result<EvalResolved> {
    let file: EvalFile = match &args.config {
        Some(p) => load_file(p)?,
        None => EvalFile::default(),
    };
    let a = args
        .a
        .clone()
        .or(file.a)
        .ok_or_else(|| CliError::config("no reference file: pass -a or set a"))?;

    // Metric defaults depend on the reference target family.
    let mut metrics = file.metrics;
    if metrics.is_empty() {
        let ds = load_dataset(&a)?;
        metrics = match ds.header.target {
            Target::Ring(_) => vec![MetricCfg::SlicedW2 { projections: 64 }],
            Target::Factorized(_) => {
                vec![MetricCfg::MarginalTv, MetricCfg::DuplicateFraction]
            }
            Target::Polygon(_) => vec![
                MetricCfg::SlicedW2 { projections: 64 },
                MetricCfg::ValidityRate { tau: 0.2 },
            ],
        };
    }

    Ok(EvalResolved {
        a,
        b: args
            .b
            .clone()
            .or(file.b)
            .ok_or_else(|| CliError::config("no file under evaluation: pass -b or set b"))?,
        seed: args.seed.or(file.seed).unwrap_or(0),
        out: args
            .out
            .clone()
            .or(file.out)
            .ok_or_else(|| CliError::config("no results path: pass --out or set out"))?,
        metrics,
    })
}

/// Rows of the file under evaluation, as flat value vectors in the space of
/// the reference.
fn load_rows(path: &Path, space: &SpaceSpec) -> Result<Vec<Vec<f64>>> {
    let mut magic = [0u8; 16];
    let n_read = std::fs::File::open(path)
        .and_then(|mut f| f.read(&mut magic))
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    if magic[..n_read].starts_with(MAGIC_DATASET.as_bytes()) {
        let ds = load_dataset(path)?;
        if ds.header.space != *space {
            return Err(CliError::config(format!(
                "{} lives in a different space than the reference",
                path.display()
            )));
        }
        return Ok(ds.states.into_iter().map(|s| s.values).collect());
    }
    read_samples_csv(path, space)
}

/// Pull the `v0..v{D-1}` columns out of a samples CSV.
fn read_samples_csv(path: &Path, space: &SpaceSpec) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
        .clone();
    let dim = space.total_dim();
    let mut cols = Vec::with_capacity(dim);
    for d in 0..dim {
        let name = format!("v{d}");
        let idx = headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::data(format!(
                "{}: column {name} missing; rows do not match the reference space \
                 ({dim} values expected)",
                path.display()
            ))
        })?;
        cols.push(idx);
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let mut row = Vec::with_capacity(dim);
        for (&c, d) in cols.iter().zip(0..) {
            let field = record.get(c).unwrap_or("");
            let v: f64 = field.parse().map_err(|_| {
                CliError::data(format!(
                    "{} row {}: v{d} is not a number: {field:?}",
                    path.display(),
                    i + 1
                ))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::data(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

fn decode_rows(rows: &[Vec<f64>], space: &SpaceSpec) -> Vec<Vec<usize>> {
    rows.iter()
        .map(|r| State::new(r.clone(), 1.0).decode_categorical(space))
        .collect()
}

fn duplicate_fraction(decoded: &[Vec<usize>]) -> f64 {
    let mut seen = std::collections::HashSet::new();
    let dup = decoded.iter().filter(|d| !seen.insert(d.as_slice().to_vec())).count();
    dup as f64 / decoded.len() as f64
}

pub fn run(
    resolved: &EvalResolved,
    config_path: Option<&Path>,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let reference = load_dataset(&resolved.a)?;
    let space = reference.header.space.clone();
    let rows_a: Vec<Vec<f64>> = reference.states.iter().map(|s| s.values.clone()).collect();
    let rows_b = load_rows(&resolved.b, &space)?;
    let hash = artifact_hash(resolved, &["out"])?;

    let mut manifest = ManifestWriter::begin(
        "eval",
        config_path,
        resolved.seed,
        to_table(resolved)?,
        &resolved.out,
        manifest_path,
    );

    // metric name -> value, in config order.
    let mut results: Vec<(String, f64)> = Vec::new();
    for metric in &resolved.metrics {
        match metric {
            MetricCfg::SlicedW2 { projections } => {
                let mut rng = stream_rng(resolved.seed, 1);
                let v = sliced_w2(&rows_a, &rows_b, space.n_continuous, *projections, &mut rng);
                results.push(("sliced_w2".into(), v));
            }
            MetricCfg::MarginalTv => {
                let marginals = match &reference.header.target {
                    Target::Factorized(f) => &f.marginals,
                    _ => {
                        return Err(CliError::config(
                            "marginal_tv needs a factorized reference target",
                        ));
                    }
                };
                let decoded = decode_rows(&rows_b, &space);
                for (j, probs) in marginals.iter().enumerate() {
                    let mut counts = vec![0.0_f64; probs.len()];
                    for d in &decoded {
                        counts[d[j]] += 1.0;
                    }
                    let tv = probs
                        .iter()
                        .zip(&counts)
                        .map(|(p, c)| (p - c / decoded.len() as f64).abs())
                        .sum::<f64>()
                        / 2.0;
                    results.push((format!("marginal_tv_b{j}"), tv));
                }
                results.push((
                    "marginal_tv_max".into(),
                    marginal_total_variation(&decoded, marginals),
                ));
            }
            MetricCfg::PropertyMae { y_target, property } => {
                let property = property
                    .clone()
                    .or_else(|| reference.header.target.label_property())
                    .ok_or_else(|| {
                        CliError::config(
                            "property_mae needs a property: the reference target defines no \
                             label, so set metrics.property",
                        )
                    })?;
                let measured: Vec<f64> =
                    rows_b.iter().map(|r| property.eval(&space, r)).collect();
                let targets = vec![*y_target; measured.len()];
                results.push(("property_mae".into(), property_mae(&measured, &targets)));
            }
            MetricCfg::ValidityRate { tau } => {
                if space.point_cloud.is_none() {
                    return Err(CliError::config(
                        "validity_rate is defined on point-cloud spaces only",
                    ));
                }
                results.push(("validity_rate".into(), validity_rate(&space, &rows_b, *tau)));
            }
            MetricCfg::DuplicateFraction => {
                let decoded = decode_rows(&rows_b, &space);
                results.push(("duplicate_fraction".into(), duplicate_fraction(&decoded)));
            }
        }
    }

    append_results(&resolved.out, &results, rows_a.len(), rows_b.len(), resolved.seed, &hash)?;
    manifest.add_output(&resolved.out);
    for (name, value) in &results {
        manifest.note(name, *value);
        println!("{name} = {}", fmt_f64(*value));
    }
    let manifest_file = manifest.finish()?;
    eprintln!(
        "appended {} metric rows to {} (manifest {})",
        results.len(),
        resolved.out.display(),
        manifest_file.display()
    );
    Ok(())
}

/// Append `metric,value,n_a,n_b,seed,config_hash` rows, writing the header
/// only when the file starts empty.
fn append_results(
    path: &Path,
    results: &[(String, f64)],
    n_a: usize,
    n_b: usize,
    seed: u64,
    hash: &str,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(["metric", "value", "n_a", "n_b", "seed", "config_hash"])
            .map_err(|e| CliError::data(e.to_string()))?;
    }
    for (name, value) in results {
        w.write_record([
            name.as_str(),
            &fmt_f64(*value),
            &n_a.to_string(),
            &n_b.to_string(),
            &seed.to_string(),
            hash,
        ])
        .map_err(|e| CliError::data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
