use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tmbench_core::simulator::ExperimentConfig;

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Path relative to the output directory, or as given for inputs.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_s: u64,
    pub elapsed_s: f64,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Digest of command, configuration, parameters and inputs.
    pub run_id: String,
    pub seed: Option<u64>,
    pub config: ExperimentConfig,
    pub parameters: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub timing: Timing,
}

impl RunManifest {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Deterministic run identifier.
pub fn run_id(
    command: &str,
    config: &ExperimentConfig,
    parameters: &serde_json::Value,
    inputs: &[FileDigest],
) -> String {
    let payload = serde_json::json!({
        "command": command,
        "config": config,
        "parameters": parameters,
        "inputs": inputs.iter().map(|d| &d.sha256).collect::<Vec<_>>(),
    });
    let digest = Sha256::digest(payload.to_string().as_bytes());
    hex::encode(&digest[..8])
}

/// First line of every table output, pointing at the manifest.
pub fn preamble(run_id: &str, manifest: &str) -> String {
    format!("run_id={run_id}; manifest={manifest}")
}

pub fn digest_file(path: &Path, label: String) -> CliResult<FileDigest> {
    let mut file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = HashingWriter::new(io::sink());
    io::copy(&mut file, &mut hasher).map_err(|e| CliError::io(path, e))?;
    Ok(hasher.digest(label))
}

/// Passes writes through while hashing them.
pub struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
    bytes: u64,
}

impl<W: Write> HashingWriter<W> {
    pub fn new(inner: W) -> Self {
        HashingWriter {
            inner,
            hasher: Sha256::new(),
            bytes: 0,
        }
    }

    pub fn digest(self, path: String) -> FileDigest {
        FileDigest {
            path,
            sha256: hex::encode(self.hasher.finalize()),
            bytes: self.bytes,
        }
    }
}

impl<W: Write> Write for HashingWriter<W> {
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

/// Output directory whose files are written atomically and digested.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<FileDigest>,
    started: Instant,
    started_unix_s: u64,
}

impl OutputDir {
    pub fn new(root: &Path) -> Self {
        OutputDir {
            root: root.to_path_buf(),
            written: Vec::new(),
            started: Instant::now(),
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn create(&self, name: &str) -> CliResult<PathBuf> {
        let target = self.path(name);
        let dir = target.parent().unwrap_or(&self.root);
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(target)
    }

    /// Streams a file through `fill`, then renames it into place.
    pub fn write_with<F>(&mut self, name: &str, fill: F) -> CliResult<FileDigest>
    where
        F: FnOnce(&mut HashingWriter<io::BufWriter<File>>) -> CliResult<()>,
    {
        let target = self.create(name)?;
        let tmp = temp_path(&target);
        let file = File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        let mut writer = HashingWriter::new(io::BufWriter::new(file));
        let result = fill(&mut writer).and_then(|()| writer.flush().map_err(|e| CliError::io(&tmp, e)));
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            return Err(e);
        }
        fs::rename(&tmp, &target).map_err(|e| CliError::io(&target, e))?;
        let digest = writer.digest(name.to_string());
        self.written.push(digest.clone());
        Ok(digest)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<FileDigest> {
        let target = self.path(name);
        self.write_with(name, |w| w.write_all(bytes).map_err(|e| CliError::io(&target, e)))
    }

    /// Writes without recording the file among the run's outputs.
    pub fn write_untracked(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let target = self.create(name)?;
        let tmp = temp_path(&target);
        fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, &target).map_err(|e| CliError::io(&target, e))
    }

    /// Writes the manifest listing every file written so far.
    #[allow(clippy::too_many_arguments)]
    pub fn finish(
        mut self,
        manifest_name: &str,
        command: &str,
        run_id: String,
        seed: Option<u64>,
        config: ExperimentConfig,
        parameters: serde_json::Value,
        inputs: Vec<FileDigest>,
    ) -> CliResult<RunManifest> {
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            run_id,
            seed,
            config,
            parameters,
            inputs,
            outputs: std::mem::take(&mut self.written),
            timing: Timing {
                started_unix_s: self.started_unix_s,
                elapsed_s: self.started.elapsed().as_secs_f64(),
            },
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        self.write_untracked(manifest_name, text.as_bytes())?;
        Ok(manifest)
    }
}

fn temp_path(target: &Path) -> PathBuf {
    let mut name = target.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    target.with_file_name(name)
}
