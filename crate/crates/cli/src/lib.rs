//! Command-line companion to the core library: file formats, configuration
//! resolution, run manifests, and the five verbs (`generate-data`, `train`,
//! `sample`, `eval`, `equivariance-audit`) plus `rerun`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod trajectory;
