//! Checkpoints: a directory of CRAT tensors plus `manifest.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::tensor::{read_crat, write_crat, Dtype, Tensor};

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Source,
    Cda,
    Split,
    Cra,
    PseudoOnly,
    EntropyMin,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Source => "source",
            Stage::Cda => "cda",
            Stage::Split => "split",
            Stage::Cra => "cra",
            Stage::PseudoOnly => "pseudo-only",
            Stage::EntropyMin => "entropy-min",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    stage: Stage,
    iteration: usize,
    complete: bool,
    config_hash: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

/// Named tensors (model parameters and optimizer buffers) at one point of
/// a training stage. `complete` is false for mid-stage snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub iteration: usize,
    pub complete: bool,
    pub config_hash: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(stage: Stage, iteration: usize, complete: bool, config_hash: impl Into<String>) -> Self {
        Self {
            stage,
            iteration,
            complete,
            config_hash: config_hash.into(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn put_params(&mut self, model: &impl Parameters) {
        for (name, t) in model.named_params() {
            self.tensors.insert(name, t.clone());
        }
    }

    /// Copies stored tensors into `model`, matching by name and shape.
    pub fn restore_params<M: Parameters>(&self, model: &mut M) -> Result<()> {
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint ({}) lacks parameter {name}", self.stage)))?;
            if t.shape() != slot.shape() {
                return Err(Error::ShapeMismatch {
                    op: "restore_params",
                    lhs: slot.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix`, in name order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> + 'a {
        self.tensors.range(prefix.to_string()..).take_while(move |(k, _)| k.starts_with(prefix))
    }

    /// Writes into a sibling temporary directory, then renames over `dir`,
    /// so an interrupted save never leaves a half-written checkpoint.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = tmp_sibling(dir);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let file = format!("{name}.crat");
            write_crat(&tmp.join(&file), t, Dtype::F64)?;
            entries.push(ManifestEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            iteration: self.iteration,
            complete: self.complete,
            config_hash: self.config_hash.clone(),
            tensors: entries,
        };
        let path = tmp.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path,
                msg: format!("unsupported checkpoint version {}", manifest.format_version),
            });
        }
        let mut tensors = BTreeMap::new();
        for entry in manifest.tensors {
            let file = dir.join(&entry.file);
            let t = read_crat(&file)?;
            if t.shape() != entry.shape {
                return Err(Error::Format {
                    path: file,
                    msg: format!("manifest says {:?}, file holds {:?}", entry.shape, t.shape()),
                });
            }
            tensors.insert(entry.name, t);
        }
        Ok(Self {
            stage: manifest.stage,
            iteration: manifest.iteration,
            complete: manifest.complete,
            config_hash: manifest.config_hash,
            tensors,
        })
    }

    /// Loads and compares the producing config hash with `expected`. A
    /// mismatch is an error unless `allow_mismatch`, in which case it is
    /// logged as a warning.
    pub fn load_verified(dir: &Path, expected: &str, allow_mismatch: bool) -> Result<Self> {
        let ck = Self::load(dir)?;
        if ck.config_hash != expected {
            if !allow_mismatch {
                return Err(Error::HashMismatch {
                    what: format!("checkpoint {}", dir.display()),
                    expected: expected.to_string(),
                    found: ck.config_hash,
                });
            }
            log::warn!(
                "checkpoint {} comes from config {}, current is {expected}",
                dir.display(),
                ck.config_hash
            );
        }
        Ok(ck)
    }
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    dir.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Discriminator, ModelSpec, SegModel};

    fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect()
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = ModelSpec::default();
        let seg = SegModel::init(&spec, 3, 5, 42);
        let disc = Discriminator::init(&spec, 5, 43);
        let mut ck = Checkpoint::new(Stage::Cda, 17, true, "abc");
        ck.put_params(&seg);
        ck.put_params(&disc);
        let a = tmp.path().join("a");
        ck.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded.stage, Stage::Cda);
        assert_eq!(loaded.iteration, 17);
        let mut seg2 = SegModel::init(&spec, 3, 5, 0);
        loaded.restore_params(&mut seg2).unwrap();
        for ((_, x), (_, y)) in seg.named_params().iter().zip(seg2.named_params().iter()) {
            assert!(x.bit_eq(y));
        }
        let b = tmp.path().join("b");
        loaded.save(&b).unwrap();
        assert_eq!(dir_bytes(&a), dir_bytes(&b));
        assert_eq!(loaded.with_prefix("disc.").count(), disc.named_params().len());
    }

    #[test]
    fn hash_mismatch_needs_override() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ck");
        Checkpoint::new(Stage::Source, 1, true, "aaa").save(&dir).unwrap();
        assert!(matches!(
            Checkpoint::load_verified(&dir, "bbb", false),
            Err(Error::HashMismatch { .. })
        ));
        assert!(Checkpoint::load_verified(&dir, "bbb", true).is_ok());
        assert!(Checkpoint::load_verified(&dir, "aaa", false).is_ok());
    }

    #[test]
    fn corrupt_tensor_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ck");
        let mut ck = Checkpoint::new(Stage::Source, 1, true, "h");
        ck.tensors.insert("x".into(), Tensor::ones(&[2]));
        ck.save(&dir).unwrap();
        let f = dir.join("x.crat");
        let mut bytes = fs::read(&f).unwrap();
        bytes[1] = 0;
        fs::write(&f, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&dir), Err(Error::Format { .. })));
    }
}
