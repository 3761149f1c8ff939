//! Run-directory bookkeeping: each command writes its outputs under a
//! fresh directory named by UTC timestamp and config hash, holding
//! everything needed to reproduce the run.
//!
//! Deterministic files (`config.toml`, `seeds.json`, `metrics.json`,
//! command artifacts, and the `manifest.json` that hashes them) are
//! byte-identical across re-runs with the same effective config. Facts
//! about a particular execution (wall time, worker count) are kept apart
//! in `runtime.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cellwarp::error::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Resolved;

/// Hex SHA-256 of a file, or of a directory's files (relative path and
/// bytes, in sorted order) for directory-shaped artifacts.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        for (rel, file) in walk_sorted(path)? {
            hasher.update(rel.as_bytes());
            hasher.update([0]);
            hasher.update(std::fs::read(&file)?);
        }
    } else {
        hasher.update(std::fs::read(path)?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn walk_sorted(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .map_err(|e| Error::Argument(format!("walk escaped {dir:?}: {e}")))?
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Serialize)]
struct ManifestInput {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    root_seed: u64,
    inputs: BTreeMap<String, ManifestInput>,
    /// Every deterministic file in the run directory, by hex SHA-256.
    outputs: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct RuntimeRecord<'a> {
    command: &'a str,
    started_unix_ms: u128,
    duration_ms: u128,
    workers: usize,
    run_dir: String,
}

/// One command's output directory plus the records accumulated while it
/// runs.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    config_hash: String,
    root_seed: u64,
    inputs: BTreeMap<String, ManifestInput>,
    started: Instant,
    started_unix_ms: u128,
}

impl RunDir {
    /// Creates `<base>/<command>-<timestamp>-<hash8>`, appending a
    /// counter when two runs collide within one second.
    pub fn create(base: &Path, command: &str, resolved: &Resolved) -> Result<RunDir> {
        let config_hash = resolved.hash()?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let stem = format!("{command}-{stamp}-{}", &config_hash[..8]);
        let mut path = base.join(&stem);
        let mut suffix = 1;
        while path.exists() {
            suffix += 1;
            path = base.join(format!("{stem}-{suffix}"));
        }
        std::fs::create_dir_all(&path)?;
        let run = RunDir {
            path,
            command: command.to_string(),
            config_hash,
            root_seed: resolved.root_seed(),
            inputs: BTreeMap::new(),
            started: Instant::now(),
            started_unix_ms: unix_ms(),
        };
        std::fs::write(run.path.join("config.toml"), resolved.snapshot_toml()?)?;
        Ok(run)
    }

    /// Absolute path for a named artifact inside the run directory.
    pub fn artifact(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Records an input artifact (checkpoint, image, CSV) by hash.
    pub fn record_input(&mut self, label: &str, path: &Path) -> Result<()> {
        let sha256 = hash_path(path).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(
                io.kind(),
                format!("{}: {io}", path.display()),
            )),
            other => other,
        })?;
        self.inputs.insert(
            label.to_string(),
            ManifestInput { path: path.to_string_lossy().into_owned(), sha256 },
        );
        Ok(())
    }

    /// Writes the per-stage seed record.
    pub fn write_seeds(&self, streams: &[(&str, u64)]) -> Result<()> {
        #[derive(Serialize)]
        struct Seeds<'a> {
            root: u64,
            streams: BTreeMap<&'a str, u64>,
        }
        let record =
            Seeds { root: self.root_seed, streams: streams.iter().copied().collect() };
        write_json(&self.path.join("seeds.json"), &record)
    }

    /// Writes `metrics.json`, hashes every deterministic file into
    /// `manifest.json`, then records execution facts in `runtime.json`.
    /// Returns the run directory path.
    pub fn finalize<M: Serialize>(self, metrics: &M, workers: usize) -> Result<PathBuf> {
        write_json(&self.path.join("metrics.json"), metrics)?;
        let mut outputs = BTreeMap::new();
        for (rel, file) in walk_sorted(&self.path)? {
            if rel == "manifest.json" || rel == "runtime.json" {
                continue;
            }
            outputs.insert(rel.clone(), hash_path(&file)?);
        }
        let manifest = Manifest {
            command: &self.command,
            config_hash: &self.config_hash,
            root_seed: self.root_seed,
            inputs: self.inputs,
            outputs,
        };
        write_json(&self.path.join("manifest.json"), &manifest)?;
        let runtime = RuntimeRecord {
            command: &self.command,
            started_unix_ms: self.started_unix_ms,
            duration_ms: self.started.elapsed().as_millis(),
            workers,
            run_dir: self.path.to_string_lossy().into_owned(),
        };
        write_json(&self.path.join("runtime.json"), &runtime)?;
        Ok(self.path)
    }
}

fn unix_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Pretty JSON with a trailing newline; field order follows the struct,
/// so identical values give identical bytes.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("cannot encode {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn run_dir_contains_snapshot_seeds_manifest_and_metrics() {
        let base = tempfile::tempdir().unwrap();
        let resolved = toml::from_str::<RunConfig>("").unwrap().resolve().unwrap();
        let run = RunDir::create(base.path(), "probe", &resolved).unwrap();
        run.write_seeds(&[("stage", 7)]).unwrap();
        std::fs::write(run.artifact("artifact.txt"), "payload").unwrap();
        let dir = run.finalize(&serde_json::json!({"ok": true}), 1).unwrap();
        for name in ["config.toml", "seeds.json", "metrics.json", "manifest.json", "runtime.json"]
        {
            assert!(dir.join(name).exists(), "{name} missing");
        }
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap())
                .unwrap();
        let outputs = manifest["outputs"].as_object().unwrap();
        assert!(outputs.contains_key("artifact.txt"));
        assert!(outputs.contains_key("metrics.json"));
        assert!(!outputs.contains_key("runtime.json"));
    }

    #[test]
    fn colliding_run_names_get_a_counter() {
        let base = tempfile::tempdir().unwrap();
        let resolved = toml::from_str::<RunConfig>("").unwrap().resolve().unwrap();
        let a = RunDir::create(base.path(), "probe", &resolved).unwrap();
        let b = RunDir::create(base.path(), "probe", &resolved).unwrap();
        assert_ne!(a.path, b.path);
    }

    #[test]
    fn directory_hash_covers_nested_files_in_stable_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("a.txt"), "one").unwrap();
        std::fs::write(dir.path().join("sub/b.txt"), "two").unwrap();
        let first = hash_path(dir.path()).unwrap();
        let second = hash_path(dir.path()).unwrap();
        assert_eq!(first, second);
        std::fs::write(dir.path().join("sub/b.txt"), "changed").unwrap();
        assert_ne!(first, hash_path(dir.path()).unwrap());
    }
}
