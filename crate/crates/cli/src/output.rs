//! Output files of one run and its manifest. Files written by a run that
//! fails are removed again.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::error::{CliError, Result};

/// Shortest decimal that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub workers: Option<usize>,
    pub config_hash: String,
    pub config_file: String,
    pub versions: Versions,
    pub outputs: Vec<OutputFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Versions {
    pub sqr_cli: &'static str,
    pub sqr_core: &'static str,
}

pub struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
    committed: bool,
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), source }
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), created_dir, written: Vec::new(), committed: false })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))
    }

    /// CSV with a header row; every row must match the header width.
    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| io_err(&self.dir.join(name), std::io::Error::other(e));
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            debug_assert_eq!(r.len(), header.len());
            w.write_record(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| io_err(&self.dir.join(name), std::io::Error::other(e.to_string())))?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)
            .map_err(|e| io_err(&self.dir.join(name), std::io::Error::other(e)))?;
        s.push('\n');
        self.write_bytes(name, s.as_bytes())
    }

    /// Writes the replay config and the manifest, and keeps the files.
    pub fn commit(mut self, command: &str, cfg: &RunConfig, workers: Option<usize>) -> Result<Manifest> {
        self.write_bytes("config.resolved", cfg.canonical().as_bytes())?;
        let mut outputs = Vec::with_capacity(self.written.len());
        for p in &self.written {
            let bytes = std::fs::read(p).map_err(|e| io_err(p, e))?;
            outputs.push(OutputFile {
                file: p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
                sha256: hex(&Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest {
            command: command.to_string(),
            seed: cfg.seed(),
            workers,
            config_hash: cfg.hash(),
            config_file: "config.resolved".into(),
            versions: Versions { sqr_cli: env!("CARGO_PKG_VERSION"), sqr_core: sqr_core::VERSION },
            outputs,
        };
        self.write_json("manifest.json", &manifest)?;
        self.committed = true;
        Ok(manifest)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
        if self.created_dir {
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}
