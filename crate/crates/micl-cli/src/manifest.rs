//! Run manifests: every subcommand writes its merged config, seed, config
//! hash, timestamps, and an index of every output file it produced into
//! `manifest.json` inside a fresh run directory.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub outputs: Vec<String>,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    let canonical = serde_json::to_vec(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(&canonical);
    hex(&hasher.finalize()[..])
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// An open run directory accumulating outputs.
pub struct Run {
    pub dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    /// Creates `runs/<timestamp>-<hash8>/` (or the explicit override) and
    /// seeds the manifest.
    pub fn create(
        subcommand: &str,
        config: serde_json::Value,
        seed: u64,
        out_dir: Option<&Path>,
    ) -> std::io::Result<Run> {
        let hash = config_hash(&config);
        let dir = match out_dir {
            Some(d) => d.to_path_buf(),
            None => PathBuf::from("runs").join(format!("{}-{}", now_unix(), &hash[..8])),
        };
        std::fs::create_dir_all(dir.join("tables"))?;
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        let manifest = RunManifest {
            schema_version: SCHEMA_VERSION,
            subcommand: subcommand.to_string(),
            config,
            seed,
            config_hash: hash,
            started_unix: now_unix(),
            finished_unix: None,
            outputs: Vec::new(),
        };
        Ok(Run { dir, manifest })
    }

    /// Registers an output path (relative to the run dir) and returns its
    /// absolute location.
    pub fn output(&mut self, rel: &str) -> PathBuf {
        self.manifest.outputs.push(rel.to_string());
        self.dir.join(rel)
    }

    pub fn finish(mut self) -> std::io::Result<PathBuf> {
        self.manifest.finished_unix = Some(now_unix());
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(self.dir)
    }
}

/// Verifies that every manifest-listed output exists and that no unlisted
/// files are present in the run directory.
pub fn self_check(dir: &Path) -> Result<(), String> {
    let manifest_path = dir.join("manifest.json");
    let raw = std::fs::read(&manifest_path).map_err(|e| format!("no manifest: {e}"))?;
    let manifest: RunManifest =
        serde_json::from_slice(&raw).map_err(|e| format!("bad manifest: {e}"))?;
    for rel in &manifest.outputs {
        if !dir.join(rel).exists() {
            return Err(format!("missing output {rel}"));
        }
    }
    let mut orphans = Vec::new();
    fn walk(base: &Path, dir: &Path, listed: &[String], orphans: &mut Vec<String>) {
        for entry in std::fs::read_dir(dir).into_iter().flatten().flatten() {
            let path = entry.path();
            if path.is_dir() {
                walk(base, &path, listed, orphans);
            } else {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().to_string();
                if rel != "manifest.json" && !listed.contains(&rel) {
                    orphans.push(rel);
                }
            }
        }
    }
    walk(dir, dir, &manifest.outputs, &mut orphans);
    if !orphans.is_empty() {
        return Err(format!("orphan files not in manifest: {orphans:?}"));
    }
    Ok(())
}
