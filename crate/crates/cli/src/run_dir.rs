use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Creates `<root>/<prefix>-<UTC timestamp>`, adding a counter on collision.
pub fn create(root: &Path, prefix: &str) -> CliResult<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ").to_string();
    let mut dir = root.join(format!("{prefix}-{stamp}"));
    let mut k = 1;
    loop {
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                dir = root.join(format!("{prefix}-{stamp}-{k}"));
                k += 1;
            }
            Err(e) => return Err(CliError::io(&dir, e)),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a, E: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: String,
    seed: u64,
    config: &'a RunConfig,
    arguments: &'a E,
    inputs: &'a [InputFile],
    outputs: Vec<String>,
}

/// Writes `manifest.json` listing the resolved config, command arguments,
/// input hashes and every file already present in `dir`.
pub fn write_manifest<E: Serialize>(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    arguments: &E,
    inputs: &[InputFile],
) -> CliResult<()> {
    let config_json = serde_json::to_string(cfg)?;
    let mut outputs = Vec::new();
    collect_files(dir, dir, &mut outputs)?;
    outputs.sort();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: sha256_hex(config_json.as_bytes()),
        seed: cfg.train.seed,
        config: cfg,
        arguments,
        inputs,
        outputs,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != "manifest.json") {
            let rel = path.strip_prefix(root).unwrap_or(&path);
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Newest `train-*` directory under `root` that holds a checkpoint.
pub fn latest_checkpoint(root: &Path) -> Option<PathBuf> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("train-"))
                && p.join("checkpoint.json").is_file()
        })
        .collect();
    dirs.sort();
    dirs.pop().map(|d| d.join("checkpoint.json"))
}
