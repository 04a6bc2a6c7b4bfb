//! On-disk workspace layout and input provenance.
//!
//! Every artifact `X` is accompanied by `X.inputs`, a text file listing the SHA-256 of each
//! input it was built from and the parameters that shaped it. Consumers re-hash the listed
//! inputs before trusting an artifact, so an edited upstream file is reported as stale.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::Context;
use sha2::{Digest, Sha256};

use crate::error::CliError;

const SIDECAR_TAG: &str = "#fcbir-inputs v1";

pub struct Workspace {
    pub root: PathBuf,
    /// Artifacts already verified during this process.
    verified: Mutex<HashSet<PathBuf>>,
}

impl Workspace {
    pub fn new(root: PathBuf) -> Self {
        Workspace {
            root,
            verified: Mutex::default(),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.tsv")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("splits").join("split.tsv")
    }

    pub fn descriptors_dir(&self) -> PathBuf {
        self.root.join("descriptors")
    }

    pub fn descriptor_index(&self) -> PathBuf {
        self.descriptors_dir().join("index.tsv")
    }

    pub fn descriptor_file(&self, entry: usize, channel: &str) -> PathBuf {
        self.descriptors_dir().join(format!("{entry:05}.{channel}.fcds"))
    }

    pub fn codebook(&self, channel: &str) -> PathBuf {
        self.root.join("codebooks").join(format!("{channel}.fccb"))
    }

    pub fn encoded(&self) -> PathBuf {
        self.root.join("encoded").join("corpus.fcen")
    }

    pub fn model(&self, mode: &str) -> PathBuf {
        self.root.join("models").join(format!("{mode}.fcsv"))
    }

    pub fn freak_pairs(&self) -> PathBuf {
        self.root.join("models").join("freak_pairs.txt")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Workspace-relative display form of `path`.
    pub fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// The command that writes `artifact`.
    pub fn producer(&self, artifact: &Path) -> String {
        let rel = self.rel(artifact);
        let top = rel.split('/').next().unwrap_or_default();
        match top {
            "manifest.tsv" | "splits" => "scan <DATASET>".into(),
            "descriptors" => "extract".into(),
            "codebooks" => "codebook".into(),
            "encoded" => "encode".into(),
            "models" if rel.ends_with("freak_pairs.txt") => "train-pairs".into(),
            "models" => {
                let mode = artifact.file_stem().unwrap_or_default().to_string_lossy();
                format!("train --mode {}", mode.trim_end_matches("_only"))
            }
            "reports" => "evaluate".into(),
            _ => "scan <DATASET>".into(),
        }
    }

    /// Fails with a pointer to the producing command when `path` does not exist.
    pub fn require(&self, path: &Path) -> Result<(), CliError> {
        let producer = self.producer(path);
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::missing(format!(
                "{} not found; run `fcbir {producer}` first",
                self.rel(path)
            )))
        }
    }

    /// Checks that `artifact` exists and that every input recorded in its sidecar is unchanged,
    /// recursively through inputs that carry their own sidecars.
    pub fn verify(&self, artifact: &Path) -> anyhow::Result<()> {
        if self.verified.lock().expect("verification cache").contains(artifact) {
            return Ok(());
        }
        self.require(artifact)?;
        let producer = self.producer(artifact);
        let sidecar = sidecar_path(artifact);
        let text = fs::read_to_string(&sidecar).map_err(|_| {
            CliError::stale(format!(
                "{} has no provenance record; rerun `fcbir {producer}`",
                self.rel(artifact)
            ))
        })?;
        for line in text.lines().filter(|l| l.starts_with("input\t")) {
            let mut parts = line.split('\t').skip(1);
            let (Some(rel), Some(recorded)) = (parts.next(), parts.next()) else {
                return Err(CliError::stale(format!("malformed provenance line {line:?} in {}", self.rel(&sidecar))).into());
            };
            let input = self.resolve(rel);
            if sidecar_path(&input).exists() {
                self.verify(&input)?;
            }
            let current = match hash_file(&input) {
                Ok(h) => h,
                Err(_) => {
                    return Err(CliError::stale(format!(
                        "{} was built from {rel}, which no longer exists; rerun `fcbir {producer}`",
                        self.rel(artifact)
                    ))
                    .into())
                }
            };
            if current != recorded {
                return Err(CliError::stale(format!(
                    "{} is stale: {rel} changed since it was built; rerun `fcbir {producer}`",
                    self.rel(artifact)
                ))
                .into());
            }
        }
        self.verified.lock().expect("verification cache").insert(artifact.to_path_buf());
        Ok(())
    }
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".inputs");
    artifact.with_file_name(name)
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hash_bytes(&bytes))
}

/// Inputs and parameters an artifact depends on, in insertion order.
#[derive(Default)]
pub struct Provenance {
    text: String,
}

impl Provenance {
    pub fn new() -> Self {
        Provenance {
            text: format!("{SIDECAR_TAG}\n"),
        }
    }

    pub fn input(mut self, ws: &Workspace, path: &Path) -> anyhow::Result<Self> {
        let hash = hash_file(path)?;
        let _ = writeln!(self.text, "input\t{}\t{hash}", ws.rel(path));
        Ok(self)
    }

    pub fn param(mut self, key: &str, value: impl std::fmt::Display) -> Self {
        let _ = writeln!(self.text, "param\t{key}\t{value}");
        self
    }

    /// True when `artifact` exists and was produced from exactly these inputs and parameters.
    pub fn is_current(&self, artifact: &Path) -> bool {
        artifact.exists() && fs::read_to_string(sidecar_path(artifact)).is_ok_and(|t| t == self.text)
    }

    pub fn record(&self, artifact: &Path) -> anyhow::Result<()> {
        let path = sidecar_path(artifact);
        fs::write(&path, &self.text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Creates the parent directory of `path`.
pub fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}
