//! Per-stage provenance: resolved configuration plus a manifest listing
//! every output file with its SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub counts: BTreeMap<String, Value>,
    pub files: Vec<FileEntry>,
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let rd = fs::read_dir(dir).map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
    for e in rd {
        let p = e
            .map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?
            .path();
        if p.is_dir() {
            collect(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write `resolved_config.json` and `manifest.json` into `stage_dir`. The
/// manifest lists every other file below `stage_dir`, sorted by path.
pub fn finish_stage(
    stage_dir: &Path,
    command: &str,
    cfg: &RunConfig,
    counts: BTreeMap<String, Value>,
) -> Result<PathBuf, CliError> {
    fs::create_dir_all(stage_dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", stage_dir.display())))?;
    resyn_core::datamodel::write_json(cfg, &stage_dir.join(RESOLVED_CONFIG))?;
    let mut files = Vec::new();
    collect(stage_dir, &mut files)?;
    let mut entries = Vec::new();
    for f in files {
        let rel = f.strip_prefix(stage_dir).expect("below stage dir");
        let rel_str = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        if rel_str == MANIFEST || rel_str == RESOLVED_CONFIG {
            continue;
        }
        entries.push(FileEntry {
            sha256: sha256_file(&f)?,
            path: rel_str,
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        command: command.to_string(),
        seed: cfg.seed(),
        config_hash: cfg.hash(),
        counts,
        files: entries,
    };
    let path = stage_dir.join(MANIFEST);
    resyn_core::datamodel::write_json(&manifest, &path)?;
    log::info!("{command}: wrote {}", path.display());
    Ok(path)
}
