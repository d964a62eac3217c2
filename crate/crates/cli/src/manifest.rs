//! Run manifests: what ran, with which inputs, and the checksum of every
//! output it wrote.

use std::io::Read;
use std::path::{Path, PathBuf};

use frameslide::schedule::ScheduleParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult, Command};

/// Placeholder for the command's `--out` path in recorded output names.
pub const OUT_TOKEN: &str = "$OUT";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserInfo {
    pub id: String,
    /// Checksum of the parameter file, when the denoiser has one.
    pub param_sha256: Option<String>,
}

/// What a command reports back for its manifest.
#[derive(Debug, Default)]
pub struct RunRecord {
    pub seed: Option<u64>,
    pub schedule: Option<ScheduleParams>,
    pub denoiser: Option<DenoiserInfo>,
    /// Files or directories read.
    pub inputs: Vec<PathBuf>,
    /// Files or directories written (directories are walked).
    pub outputs: Vec<PathBuf>,
    pub manifest_path: PathBuf,
    pub calls_per_frame: Option<f64>,
    pub peak_resident_latents: Option<usize>,
    pub duration_ms: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: Command,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub rng: String,
    pub schedule: Option<ScheduleParams>,
    pub denoiser: Option<DenoiserInfo>,
    pub inputs: Vec<FileDigest>,
    /// Output names relative to `--out`, prefixed with `$OUT`.
    pub outputs: Vec<FileDigest>,
    pub duration_ms: u128,
    /// Mean guided denoise calls per synthesized frame.
    pub calls_per_frame: Option<f64>,
    pub peak_resident_latents: Option<usize>,
    #[serde(skip)]
    pub path: PathBuf,
}

impl RunManifest {
    pub(crate) fn finish(command: Command, argv: Vec<String>, record: RunRecord) -> CliResult<Self> {
        let out = command.out().to_string_lossy().into_owned();
        let mut outputs = Vec::new();
        for root in &record.outputs {
            for digest in digest_tree(root)? {
                if Path::new(&digest.path) == record.manifest_path {
                    continue;
                }
                let rel = digest.path.strip_prefix(out.as_str()).ok_or_else(|| {
                    CliError::config(format!("output {} lies outside {out}", digest.path))
                })?;
                outputs.push(FileDigest {
                    path: format!("{OUT_TOKEN}{rel}"),
                    sha256: digest.sha256,
                });
            }
        }
        let mut inputs = Vec::new();
        for root in &record.inputs {
            inputs.extend(digest_tree(root)?);
        }
        Ok(Self {
            tool: format!("frameslide {}", env!("CARGO_PKG_VERSION")),
            command,
            argv,
            seed: record.seed,
            rng: frameslide::rng::RNG_ALGORITHM.to_string(),
            schedule: record.schedule,
            denoiser: record.denoiser,
            inputs,
            outputs,
            duration_ms: record.duration_ms,
            calls_per_frame: record.calls_per_frame,
            peak_resident_latents: record.peak_resident_latents,
            path: record.manifest_path,
        })
    }

    pub fn save(&self) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::config(format!("cannot serialize manifest: {e}")))?;
        text.push('\n');
        std::fs::write(&self.path, text).map_err(|e| CliError::io(&self.path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("malformed manifest {}: {e}", path.display())))?;
        m.path = path.to_path_buf();
        Ok(m)
    }
}

/// Manifest location for a command writing into directory `out`.
pub fn dir_manifest(out: &Path) -> PathBuf {
    out.join("run.json")
}

/// Manifest location for a command writing the single file `out`.
pub fn file_manifest(out: &Path) -> PathBuf {
    sibling(out, ".run.json")
}

/// `out` with `suffix` appended to its file name.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Digests of `root` (a file) or of every file below it, in name order.
pub fn digest_tree(root: &Path) -> CliResult<Vec<FileDigest>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            CliError::io(&path, e.into())
        })?;
        if entry.file_type().is_file() {
            out.push(FileDigest {
                path: entry.path().to_string_lossy().into_owned(),
                sha256: sha256_file(entry.path())?,
            });
        }
    }
    Ok(out)
}
