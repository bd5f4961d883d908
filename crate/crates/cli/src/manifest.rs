//! Reproducibility manifests: configuration, seeds, versions and content hashes.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{io_error, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub threads: usize,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// Hash of a file, also covering its JSON sidecar when one exists.
pub fn hash_with_sidecar(path: &Path) -> CliResult<String> {
    let (sidecar, payload) = cdpa_core::io::paired_paths(path);
    let mut h = Sha256::new();
    for p in [&sidecar, &payload] {
        if p.exists() {
            h.update(std::fs::read(p).map_err(|e| io_error(p, e))?);
        }
    }
    if !sidecar.exists() && !payload.exists() {
        h.update(std::fs::read(path).map_err(|e| io_error(path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

impl Manifest {
    pub fn new(command: &str, threads: usize, config: &impl Serialize) -> CliResult<Self> {
        Ok(Self {
            tool: "cdpa",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            threads,
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(FileHash { path: path.display().to_string(), sha256: hash_with_sidecar(path)? });
        Ok(())
    }

    /// Records an output under `label` (a name independent of the output directory).
    pub fn output(&mut self, label: &str, path: &Path) -> CliResult<()> {
        self.outputs.push(FileHash { path: label.to_string(), sha256: hash_with_sidecar(path)? });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        cdpa_core::io::atomic_write(path, text.as_bytes())?;
        Ok(())
    }
}
