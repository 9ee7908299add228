use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::FlatConfig;
use crate::error::Result;
use crate::tensor::ATNS_VERSION;
use crate::train::HISTORY_HEADER;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Everything needed to repeat a command: the command line shape, the full
/// effective config (seed included) and the formats of what was written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub formats: BTreeMap<String, String>,
    pub files: Vec<FileEntry>,
    pub status: String,
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else if path.strip_prefix(root).map_or(true, |p| p != Path::new(MANIFEST_FILE)) {
            out.push(path);
        }
    }
    Ok(())
}

/// Lists and hashes every file under `dir` except the manifest itself.
pub fn file_entries(dir: &Path) -> Result<Vec<FileEntry>> {
    let mut paths = Vec::new();
    walk(dir, dir, &mut paths)?;
    paths
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p)?;
            let rel = p.strip_prefix(dir).expect("walked under dir");
            let path = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            Ok(FileEntry { path, bytes: bytes.len() as u64, sha256: format!("{:x}", Sha256::digest(&bytes)) })
        })
        .collect()
}

pub fn write_manifest(dir: &Path, command: &str, seed: u64, config: &FlatConfig, status: &str) -> Result<Manifest> {
    let formats = BTreeMap::from([
        ("atns".to_string(), format!("ATNS v{ATNS_VERSION}, f32 little-endian")),
        ("history_csv".to_string(), HISTORY_HEADER.to_string()),
        ("config".to_string(), "flat key = value".to_string()),
    ]);
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed,
        config: config.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        formats,
        files: file_entries(dir)?,
        status: status.to_string(),
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}
