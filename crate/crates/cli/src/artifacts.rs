//! On-disk layout, manifests and digest checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dmmia_core::data::Dataset;
use dmmia_core::models::{write_atomic, Checkpoint};
use dmmia_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{CliError, CliResult, Kind};

/// Metadata key holding the pipeline config digest in every checkpoint.
pub const DIGEST_KEY: &str = "config_digest";

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn public_data(&self) -> PathBuf {
        self.root.join("data/public.ckpt")
    }

    pub fn private_data(&self) -> PathBuf {
        self.root.join("data/private.ckpt")
    }

    pub fn target(&self) -> PathBuf {
        self.root.join("models/target.ckpt")
    }

    pub fn evaluator(&self) -> PathBuf {
        self.root.join("models/evaluator.ckpt")
    }

    pub fn generator(&self) -> PathBuf {
        self.root.join("models/generator.ckpt")
    }

    pub fn attack_dir(&self, method: &str) -> PathBuf {
        self.root.join("attacks").join(method)
    }

    /// `attacks/<method>/class<k>` without extension.
    pub fn attack_stem(&self, method: &str, class: usize) -> PathBuf {
        self.attack_dir(method).join(format!("class{class}"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }

    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }
}

pub fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::missing(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_secs: f64,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config_digest: &str, seed: u64) -> Self {
        Self {
            command: command.to_owned(),
            config_digest: config_digest.to_owned(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_time_secs: 0.0,
            notes: BTreeMap::new(),
        }
    }

    pub fn load(layout: &Layout, command: &str) -> CliResult<Self> {
        let path = layout.manifest(command);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| CliError::missing(format!("{} not found; run `{command}` first", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::new(Kind::Input, format!("{}: {e}", path.display())))
    }

    pub fn save(&self, layout: &Layout) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::internal(e.to_string()))?;
        text.push('\n');
        write_atomic(&layout.manifest(&self.command), text.as_bytes())?;
        Ok(())
    }

    pub fn input(&mut self, layout: &Layout, path: &Path) -> CliResult<()> {
        self.inputs.push(FileDigest {
            path: layout.relative(path),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, layout: &Layout, path: &Path, bytes: &[u8]) {
        self.outputs.push(FileDigest {
            path: layout.relative(path),
            sha256: sha256_hex(bytes),
        });
    }

    /// Errors unless every listed output still hashes to its recorded value.
    pub fn verify_outputs(&self, layout: &Layout) -> CliResult<()> {
        for f in &self.outputs {
            let found = sha256_file(&layout.root.join(&f.path))?;
            if found != f.sha256 {
                return Err(CliError::new(
                    Kind::DigestMismatch,
                    format!("{} changed since `{}` wrote it (sha256 {found}, manifest {})", f.path, self.command, f.sha256),
                ));
            }
        }
        Ok(())
    }
}

/// Refuses artifacts from another configuration unless `force`.
pub fn check_digest(what: &str, found: &str, expected: &str, force: bool) -> CliResult<()> {
    if found == expected {
        return Ok(());
    }
    if force {
        log::warn!("{what} was produced by config {found}, current config is {expected}; continuing (--force)");
        return Ok(());
    }
    Err(CliError::new(
        Kind::DigestMismatch,
        format!("{what} was produced by config {found}, current config is {expected}; rerun upstream steps or pass --force"),
    ))
}

/// Writes atomically and records the output in `manifest`.
pub fn emit(layout: &Layout, manifest: &mut Manifest, path: &Path, bytes: &[u8]) -> CliResult<()> {
    write_atomic(path, bytes)?;
    manifest.output(layout, path, bytes);
    Ok(())
}

pub fn emit_checkpoint(layout: &Layout, manifest: &mut Manifest, path: &Path, mut ckpt: Checkpoint, digest: &str) -> CliResult<()> {
    ckpt.set(DIGEST_KEY, digest);
    emit(layout, manifest, path, &ckpt.to_bytes())
}

/// Loads a checkpoint written by `producer` and checks its config digest.
pub fn load_checkpoint(path: &Path, producer: &str, digest: &str, force: bool) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::missing(format!("{} not found; run `{producer}` first", path.display())));
    }
    let ckpt = Checkpoint::load(path).map_err(|e| CliError::new(Kind::Input, e.to_string()))?;
    let found = ckpt.get(DIGEST_KEY).map_err(|e| CliError::new(Kind::Input, format!("{}: {e}", path.display())))?;
    check_digest(&path.display().to_string(), found, digest, force)?;
    Ok(ckpt)
}

pub fn dataset_to_checkpoint(ds: &Dataset) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.set("kind", "dataset");
    c.set("num_classes", ds.num_classes());
    c.push("images", ds.images());
    let labels: Vec<f64> = ds.labels().iter().map(|&l| l as f64).collect();
    c.push("labels", &Tensor::new(vec![labels.len()], labels).expect("finite labels"));
    c
}

pub fn dataset_from_checkpoint(c: &Checkpoint) -> CliResult<Dataset> {
    let bad = |e: String| CliError::new(Kind::Input, e);
    if c.get("kind").map_err(|e| bad(e.to_string()))? != "dataset" {
        return Err(bad("checkpoint does not hold a dataset".into()));
    }
    let k: usize = c.parse("num_classes").map_err(|e| bad(e.to_string()))?;
    let images = c.tensor_any("images").map_err(|e| bad(e.to_string()))?;
    let labels = c.tensor_any("labels").map_err(|e| bad(e.to_string()))?.data().iter().map(|&v| v as usize).collect();
    Dataset::new(images, labels, k).map_err(|e| bad(e.to_string()))
}

/// Little-endian f64 dump.
pub fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_from_bytes(bytes: &[u8]) -> CliResult<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(CliError::new(Kind::Input, format!("raw dump length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dmmia_core::data::synth_digits;
    use dmmia_core::numerics::Rng;

    #[test]
    fn dataset_round_trip() {
        let ds = synth_digits(&mut Rng::new(1), 3, 4).unwrap();
        let back = dataset_from_checkpoint(&Checkpoint::from_bytes(&dataset_to_checkpoint(&ds).to_bytes()).unwrap()).unwrap();
        assert_eq!(back.images(), ds.images());
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.num_classes(), 4);
    }

    #[test]
    fn raw_dump_round_trip() {
        let v = vec![0.0, -1.5, 1e-300, 0.25];
        assert_eq!(f64_from_bytes(&f64_bytes(&v)).unwrap(), v);
        assert!(f64_from_bytes(&[0; 7]).is_err());
    }

    #[test]
    fn digest_mismatch_refused_unless_forced() {
        assert_eq!(check_digest("x", "a", "b", false).unwrap_err().kind, Kind::DigestMismatch);
        assert!(check_digest("x", "a", "b", true).is_ok());
        assert!(check_digest("x", "a", "a", false).is_ok());
    }

    #[test]
    fn tampered_output_detected() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let mut m = Manifest::new("t", "d", 0);
        let p = dir.path().join("a/b.bin");
        emit(&layout, &mut m, &p, b"abc").unwrap();
        assert_eq!(m.outputs[0].path, "a/b.bin");
        m.verify_outputs(&layout).unwrap();
        std::fs::write(&p, b"abd").unwrap();
        assert_eq!(m.verify_outputs(&layout).unwrap_err().kind, Kind::DigestMismatch);
    }
}
