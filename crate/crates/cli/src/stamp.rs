//! Per-stage stamps: what a stage consumed and produced, by content hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fastattrib::hash::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    /// Hash of the config keys this stage reads.
    pub stage_hash: String,
    /// Hash of the whole run config at the time the stage ran.
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Stamp {
    pub fn load(path: &Path) -> std::io::Result<Option<Self>> {
        match fs::read(path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes).ok()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self).expect("stamp serializes"))
    }
}

/// Content hash of a file, or of a directory tree (relative paths and file
/// hashes in sorted order). `None` if the path does not exist.
pub fn hash_path(path: &Path) -> std::io::Result<Option<String>> {
    if !path.exists() {
        return Ok(None);
    }
    if path.is_file() {
        return Ok(Some(sha256_hex(&fs::read(path)?)));
    }
    let mut entries = Vec::new();
    collect(path, path, &mut entries)?;
    entries.sort();
    let listing: String = entries.iter().map(|(p, h)| format!("{p} {h}\n")).collect();
    Ok(Some(sha256_hex(listing.as_bytes())))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            out.push((rel.to_string_lossy().replace('\\', "/"), sha256_hex(&fs::read(&path)?)));
        }
    }
    Ok(())
}

/// Entries of `recorded` whose current hash differs, as `(path, recorded, now)`.
pub fn changed(root: &Path, recorded: &BTreeMap<String, String>) -> std::io::Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    for (rel, want) in recorded {
        let now = hash_path(&root.join(rel))?.unwrap_or_else(|| "missing".into());
        if &now != want {
            out.push((rel.clone(), want.clone(), now));
        }
    }
    Ok(out)
}
