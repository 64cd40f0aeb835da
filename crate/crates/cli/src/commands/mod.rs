//! One module per verb. Each command splits into `resolve` (defaults, config
//! file, and flags merged into a concrete `*Resolved`) and `run` (execute a
//! resolved config and write the manifest), so `rerun` can replay a manifest
//! snapshot through exactly the code path the original invocation took.

pub mod audit;
pub mod eval;
pub mod generate_data;
pub mod rerun;
pub mod sample;
pub mod train;

use std::path::{Path, PathBuf};

/// Move `path` into `dir`, keeping only its file name. Used by `rerun
/// --out-dir` to redirect outputs without touching inputs.
pub fn redirect(path: &Path, dir: Option<&Path>) -> PathBuf {
    match dir {
        Some(d) => d.join(path.file_name().unwrap_or_default()),
        None => path.to_path_buf(),
    }
}
