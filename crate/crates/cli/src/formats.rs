//! On-disk artifact formats.
//!
//! Binary artifacts (checkpoints, datasets, trajectory dumps) share one
//! envelope: a single magic line naming the kind, the format version, and
//! the header length; a TOML header of exactly that many lines; then the
//! payload as raw little-endian 64-bit floats. The header is
//! human-inspectable with `head`, the payload round-trips bit-exactly, and
//! the magic line lets a reader reject foreign or future files with a
//! message that names the version it found.
//!
//! All writes in this module are atomic: content goes to a sibling
//! temporary file which is renamed over the destination, so a crashed run
//! never leaves a half-written artifact behind.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CliError, Result};

/// Format revision this build writes and the only one it accepts.
pub const FORMAT_VERSION: u32 = 1;

pub const MAGIC_CHECKPOINT: &str = "vfm-checkpoint";
pub const MAGIC_DATASET: &str = "vfm-dataset";
pub const MAGIC_TRAJECTORY: &str = "vfm-trajectory";

/// Write `bytes` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| CliError::config(format!("not a file path: {}", path.display())))?;
    let mut tmp = path.to_path_buf();
    tmp.set_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize a float slice as little-endian bytes.
fn floats_to_bytes(floats: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(floats.len() * 8);
    for v in floats {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_floats(bytes: &[u8], what: &str) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(CliError::data(format!(
            "{what}: payload length {} is not a multiple of 8 bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect())
}

/// Write one binary envelope: magic line, TOML header, float payload.
pub fn write_envelope(path: &Path, magic: &str, header: &str, floats: &[f64]) -> Result<()> {
    let header = if header.ends_with('\n') || header.is_empty() {
        header.to_string()
    } else {
        format!("{header}\n")
    };
    let header_lines = header.lines().count();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(
        format!("{magic} v{FORMAT_VERSION} header_lines={header_lines}\n").as_bytes(),
    );
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&floats_to_bytes(floats));
    write_atomic(path, &bytes)
}

/// A parsed envelope: its TOML header text and float payload.
#[derive(Debug)]
pub struct Envelope {
    pub header: String,
    pub floats: Vec<f64>,
}

/// Read and validate an envelope of the expected kind. Rejections name the
/// kind and version they saw, so stale files fail loudly rather than
/// misparse.
pub fn read_envelope(path: &Path, magic: &str) -> Result<Envelope> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let display = path.display();

    let line_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::data(format!("{display}: missing magic line")))?;
    let magic_line = std::str::from_utf8(&bytes[..line_end])
        .map_err(|_| CliError::data(format!("{display}: magic line is not UTF-8")))?;

    let mut parts = magic_line.split_whitespace();
    let kind = parts.next().unwrap_or("");
    let version = parts.next().unwrap_or("");
    let lines_field = parts.next().unwrap_or("");
    if kind != magic {
        return Err(CliError::data(format!(
            "{display}: expected a `{magic}` file, found `{kind}`"
        )));
    }
    if version != format!("v{FORMAT_VERSION}") {
        return Err(CliError::data(format!(
            "{display}: unsupported {magic} version `{version}` (this build reads v{FORMAT_VERSION})"
        )));
    }
    let header_lines: usize = lines_field
        .strip_prefix("header_lines=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| {
            CliError::data(format!("{display}: malformed header_lines field `{lines_field}`"))
        })?;

    // Walk exactly `header_lines` newline-terminated lines.
    let mut cursor = line_end + 1;
    let header_start = cursor;
    for i in 0..header_lines {
        match bytes[cursor..].iter().position(|&b| b == b'\n') {
            Some(p) => cursor += p + 1,
            None => {
                return Err(CliError::data(format!(
                    "{display}: header truncated at line {} of {header_lines}",
                    i + 1
                )))
            }
        }
    }
    let header = std::str::from_utf8(&bytes[header_start..cursor])
        .map_err(|_| CliError::data(format!("{display}: header is not UTF-8")))?
        .to_string();
    let floats = bytes_to_floats(&bytes[cursor..], &format!("{display}"))?;
    Ok(Envelope { header, floats })
}

/// Parse an envelope header into a typed structure, with the file path in
/// any error message.
pub fn parse_header<T: serde::de::DeserializeOwned>(path: &Path, header: &str) -> Result<T> {
    toml::from_str(header).map_err(|e| {
        CliError::data(format!("{}: corrupt header: {e}", path.display()))
    })
}

/// Render floats the way every CSV in this crate does: shortest string that
/// parses back to the identical bits, empty for a missing value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("vfm-format-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(format!("{name}-{}", std::process::id()))
    }

    #[test]
    fn envelope_round_trips_header_and_payload_bits() {
        let path = tmp("roundtrip.bin");
        let header = "alpha = 1\n[inner]\nbeta = \"x\"";
        let floats = vec![0.1, -3.5e300, f64::MIN_POSITIVE, 0.0, 12345.678];
        write_envelope(&path, MAGIC_DATASET, header, &floats).unwrap();
        let env = read_envelope(&path, MAGIC_DATASET).unwrap();
        assert_eq!(env.header.trim_end(), header);
        assert_eq!(env.floats.len(), floats.len());
        for (a, b) in env.floats.iter().zip(&floats) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn wrong_kind_and_version_are_named_in_the_error() {
        let path = tmp("kind.bin");
        write_envelope(&path, MAGIC_DATASET, "a = 1", &[1.0]).unwrap();
        let err = read_envelope(&path, MAGIC_CHECKPOINT).unwrap_err();
        assert!(err.to_string().contains("vfm-checkpoint"), "{err}");
        assert!(err.to_string().contains("vfm-dataset"), "{err}");

        let bumped = fs::read(&path)
            .unwrap()
            .iter()
            .map(|&b| b)
            .collect::<Vec<u8>>();
        let text = String::from_utf8_lossy(&bumped).replace("v1", "v9");
        fs::write(&path, text.as_bytes()).unwrap();
        let err = read_envelope(&path, MAGIC_DATASET).unwrap_err();
        assert!(err.to_string().contains("v9"), "{err}");
        assert!(err.to_string().contains("v1"), "{err}");
    }

    #[test]
    fn truncated_header_is_rejected() {
        let path = tmp("trunc.bin");
        fs::write(&path, b"vfm-dataset v1 header_lines=3\nonly = 1\n").unwrap();
        let err = read_envelope(&path, MAGIC_DATASET).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn ragged_payload_is_rejected() {
        let path = tmp("ragged.bin");
        let mut bytes = b"vfm-dataset v1 header_lines=1\na = 1\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        fs::write(&path, &bytes).unwrap();
        let err = read_envelope(&path, MAGIC_DATASET).unwrap_err();
        assert!(err.to_string().contains("multiple of 8"), "{err}");
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-17, 6.02e23, f64::MAX] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }
}
