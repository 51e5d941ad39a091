//! Run directories and their manifests.
//!
//! Every file written into a run directory goes through [`RunDir`], which
//! hashes it on the way out; `manifest.json` lists those digests together
//! with the inputs, the configuration snapshot, the seed and stage timings.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: u64,
    /// Parsed configuration file, if the command took one.
    pub config: Option<serde_json::Value>,
    /// Command-line parameters that affect the outputs.
    pub parameters: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub timings: Vec<StageTiming>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            location: format!("line {}", e.line()),
            message: e.to_string(),
        })
    }
}

struct HashWriter<W> {
    inner: W,
    hasher: Sha256,
    bytes: u64,
}

impl<W: Write> Write for HashWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut w = HashWriter {
        inner: io::sink(),
        hasher: Sha256::new(),
        bytes: 0,
    };
    io::copy(&mut file, &mut w).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        bytes: w.bytes,
        sha256: hex::encode(w.hasher.finalize()),
    })
}

pub struct RunDir {
    root: PathBuf,
    command: String,
    seed: u64,
    config: Option<serde_json::Value>,
    parameters: serde_json::Value,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    timings: Vec<StageTiming>,
}

impl RunDir {
    /// Creates `root`, which must not exist yet.
    pub fn create(root: &Path, command: &str, seed: u64) -> Result<Self> {
        if root.exists() {
            return Err(Error::Usage(format!(
                "run directory {} already exists; choose a new --out",
                root.display()
            )));
        }
        if let Some(parent) = root.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::create_dir(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            command: command.into(),
            seed,
            config: None,
            parameters: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_config(&mut self, config: serde_json::Value) {
        self.config = Some(config);
    }

    pub fn set_parameters(&mut self, parameters: serde_json::Value) {
        self.parameters = parameters;
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest_file(path)?);
        Ok(())
    }

    /// Writes `rel` inside the run directory through `fill`, recording its digest.
    pub fn write_with(&mut self, rel: &str, fill: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = HashWriter {
            inner: BufWriter::with_capacity(1 << 20, file),
            hasher: Sha256::new(),
            bytes: 0,
        };
        fill(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(FileDigest {
            path: rel.into(),
            bytes: w.bytes,
            sha256: hex::encode(w.hasher.finalize()),
        });
        Ok(path)
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        self.write_with(rel, |w| w.write_all(bytes))
    }

    /// Runs `f`, recording its wall time under `stage`; errors are tagged
    /// with the stage name.
    pub fn stage<T>(&mut self, stage: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f(self).map_err(|e| e.in_stage(stage));
        self.timings.push(StageTiming {
            stage: stage.into(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn outputs(&self) -> &[FileDigest] {
        &self.outputs
    }

    fn manifest(&self, error: Option<&Error>) -> Manifest {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            status: if error.is_some() { "failed" } else { "ok" }.into(),
            error: error.map(|e| e.to_string()),
            seed: self.seed,
            config: self.config.clone(),
            parameters: self.parameters.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            timings: self.timings.clone(),
        }
    }

    /// Writes the manifest, marking the run failed if `result` is an error,
    /// and passes `result` through.
    pub fn finish<T>(self, result: Result<T>) -> Result<(T, Manifest)> {
        let manifest = self.manifest(result.as_ref().err());
        let path = self.root.join(MANIFEST_NAME);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        result.map(|v| (v, manifest))
    }
}
