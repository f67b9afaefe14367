//! Output directory handling. Every file goes through [`RunOutput`], which
//! records its digest; the manifest is written last and its presence marks a
//! complete run. Dropping an unfinished `RunOutput` removes what it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub subcommand: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub scale: f64,
    pub files: Vec<FileDigest>,
    pub wall_time_s: f64,
    /// Evaluations of the experiment's forward model(s).
    pub h_evals: u64,
    pub jacobian_evals: u64,
    /// FEM solves spent building a surrogate or validating one.
    pub fem_solves: u64,
}

impl RunManifest {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("no complete run in {}", dir.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn file(&self, name: &str) -> Option<&FileDigest> {
        self.files.iter().find(|f| f.path == name)
    }
}

pub struct RunOutput {
    dir: PathBuf,
    files: Vec<FileDigest>,
    started: Instant,
    finished: bool,
}

impl RunOutput {
    /// Creates `dir` and removes a manifest left by an earlier run.
    pub fn create(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let stale = dir.join(MANIFEST_FILE);
        if stale.exists() {
            fs::remove_file(&stale)?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            started: Instant::now(),
            finished: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileDigest {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
        self.write_bytes(name, &bytes)
    }

    /// CSV with a header decided at run time (design columns vary in count).
    pub fn write_table(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let bytes = serde_json::to_vec_pretty(value)?;
        self.write_bytes(name, &bytes)
    }

    /// Fills in file digests and wall time, then writes the manifest.
    pub fn finish(mut self, mut manifest: RunManifest) -> anyhow::Result<RunManifest> {
        manifest.files = self.files.clone();
        manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        let bytes = serde_json::to_vec_pretty(&manifest)?;
        fs::write(self.dir.join(MANIFEST_FILE), bytes)?;
        self.finished = true;
        Ok(manifest)
    }
}

impl Drop for RunOutput {
    fn drop(&mut self) {
        if !self.finished {
            for f in &self.files {
                let _ = fs::remove_file(self.dir.join(&f.path));
            }
        }
    }
}

/// SHA-256 of a file on disk.
pub fn file_digest(path: &Path) -> anyhow::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
