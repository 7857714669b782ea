use std::fs::File;
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use rtsla::pipeline::RunConfig;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let text = serde_json::to_vec(cfg)?;
    Ok(hex(&Sha256::digest(&text)))
}

fn file_hash(path: &Path) -> Result<String> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    Ok(hex(&Sha256::digest(&buf)))
}

/// Records what a command read and wrote so the run can be replayed.
pub struct Manifest {
    command: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: impl Into<String>) -> Self {
        Manifest {
            command: command.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(&self, dir: &Path, cfg: &RunConfig) -> Result<PathBuf> {
        let digest = |paths: &[PathBuf]| -> Result<Vec<serde_json::Value>> {
            paths
                .iter()
                .map(|p| Ok(json!({ "path": p, "sha256": file_hash(p)? })))
                .collect()
        };
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": config_hash(cfg)?,
            "seed": cfg.seed,
            "config": cfg,
            "inputs": digest(&self.inputs)?,
            "outputs": digest(&self.outputs)?,
        });
        let path = dir.join(format!("manifest_{}.json", self.command));
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        Ok(path)
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Token ids joined by spaces, for CSV cells.
pub fn tokens(ts: &[u32]) -> String {
    ts.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}
