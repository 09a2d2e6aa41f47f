//! Run manifests: a JSON record of exactly what produced each artifact.
//! The resolved configuration plus the seed determines every output byte, so
//! the manifest doubles as a reproduction recipe; content hashes let a reader
//! check that the files on disk are the ones the run wrote.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::CliConfig;

/// One artifact the run wrote: file name (relative to the manifest) and the
/// SHA-256 of its content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
}

/// Everything needed to reproduce and check a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Version of the binary that produced the run, with the source revision
    /// when one is discoverable.
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    pub threads: usize,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// "ok" or "failed: <error>"; artifacts written before a failure are
    /// still listed and hashed.
    pub status: String,
    /// Config keys that fell back to documented defaults.
    pub applied_defaults: Vec<String>,
    /// Command-line overrides applied on top of the config file.
    pub flag_overrides: Vec<String>,
    /// The fully resolved configuration snapshot.
    pub config: CliConfig,
    pub outputs: Vec<OutputRecord>,
}

impl RunManifest {
    /// Writes `manifest.json` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let mut file = File::create(&path)
            .with_context(|| format!("cannot create manifest {}", path.display()))?;
        serde_json::to_writer_pretty(&mut file, self).context("cannot serialize manifest")?;
        file.write_all(b"\n")?;
        Ok(path)
    }
}

/// Streaming SHA-256 of a file, as lowercase hex.
pub fn sha256_hex(path: &Path) -> Result<String> {
    let file =
        File::open(path).with_context(|| format!("cannot open {} for hashing", path.display()))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Re-hashes every output a manifest lists. Returns `(file, matches)` pairs;
/// a missing file counts as a mismatch.
pub fn verify_manifest(manifest_path: &Path) -> Result<Vec<(String, bool)>> {
    let text = std::fs::read_to_string(manifest_path)
        .with_context(|| format!("cannot read manifest {}", manifest_path.display()))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .with_context(|| format!("manifest {} does not parse", manifest_path.display()))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut results = Vec::with_capacity(manifest.outputs.len());
    for record in &manifest.outputs {
        let path = dir.join(&record.file);
        let matches = match sha256_hex(&path) {
            Ok(hash) => hash == record.sha256,
            Err(_) => false,
        };
        results.push((record.file.clone(), matches));
    }
    Ok(results)
}

/// Unix timestamp in whole seconds.
pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Package version plus the source revision when `git` can describe the
/// working tree, in `<pkg>-<version>+g<describe>` style.
pub fn version_string() -> String {
    let base = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));
    let described = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match described {
        Some(rev) => format!("{base}+g{rev}"),
        None => base.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn sha256_matches_the_known_empty_string_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, b"").unwrap();
        assert_eq!(
            sha256_hex(&path).unwrap(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855",
            "empty-input digest is a published constant"
        );
    }

    #[test]
    fn manifest_verification_round_trips_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data.csv");
        std::fs::write(&out, "a,b\n1,2\n").unwrap();
        let (config, applied_defaults) = parse_config("").unwrap();
        let manifest = RunManifest {
            version: version_string(),
            subcommand: "rate".into(),
            seed: 42,
            threads: 1,
            started_unix: now_unix(),
            finished_unix: now_unix(),
            status: "ok".into(),
            applied_defaults,
            flag_overrides: Vec::new(),
            config,
            outputs: vec![OutputRecord {
                file: "data.csv".into(),
                sha256: sha256_hex(&out).unwrap(),
            }],
        };
        let manifest_path = manifest.write(dir.path()).unwrap();
        let checks = verify_manifest(&manifest_path).unwrap();
        assert_eq!(checks, vec![("data.csv".to_string(), true)]);

        std::fs::write(&out, "a,b\n1,3\n").unwrap();
        let checks = verify_manifest(&manifest_path).unwrap();
        assert_eq!(checks, vec![("data.csv".to_string(), false)], "edit must break the hash");
    }
}
