//! Output directory layout, the guarded data loader and the manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{load_cube, load_mask, load_measurement, CodedMask, Measurement, SpectralCube};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

/// Paths inside an experiment output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn mask(&self) -> PathBuf {
        self.data().join("mask.msic")
    }
    pub fn truth_dir(&self) -> PathBuf {
        self.data().join("truth")
    }
    pub fn measurement_dir(&self) -> PathBuf {
        self.data().join("measurements")
    }
    pub fn truth(&self, id: &str) -> PathBuf {
        self.truth_dir().join(format!("{id}.msic"))
    }
    pub fn measurement(&self, id: &str) -> PathBuf {
        self.measurement_dir().join(format!("{id}.msic"))
    }
    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.train().join("checkpoints")
    }
    pub fn final_model(&self) -> PathBuf {
        self.train().join("model.rfn")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn ablate(&self) -> PathBuf {
        self.root.join("ablate")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TruthPolicy {
    Allow,
    /// Any ground-truth load fails without touching the file.
    Deny,
}

/// Read access to generated data. Ground-truth loads go through a policy
/// check and a counter of files actually opened.
#[derive(Debug)]
pub struct DataDir {
    layout: Layout,
    policy: TruthPolicy,
    purpose: String,
    truth_reads: AtomicUsize,
}

impl DataDir {
    pub fn open(layout: &Layout, policy: TruthPolicy, purpose: impl Into<String>) -> Result<Self> {
        let dir = layout.measurement_dir();
        if !dir.is_dir() {
            return Err(Error::io(
                &dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no generated data; run gen-data first"),
            ));
        }
        Ok(DataDir {
            layout: layout.clone(),
            policy,
            purpose: purpose.into(),
            truth_reads: AtomicUsize::new(0),
        })
    }

    /// Scene ids present in the measurement directory, sorted.
    pub fn scene_ids(&self) -> Result<Vec<String>> {
        let dir = self.layout.measurement_dir();
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                name.strip_suffix(".msic").map(str::to_string)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn mask(&self) -> Result<CodedMask> {
        load_mask(self.layout.mask())
    }

    pub fn measurement(&self, id: &str) -> Result<Measurement<f32>> {
        load_measurement(self.layout.measurement(id))
    }

    pub fn truth(&self, id: &str) -> Result<SpectralCube> {
        if self.policy == TruthPolicy::Deny {
            return Err(Error::GroundTruthDenied {
                scene: id.to_string(),
                mode: self.purpose.clone(),
            });
        }
        self.truth_reads.fetch_add(1, Ordering::SeqCst);
        load_cube(self.layout.truth(id))
    }

    pub fn truth_reads(&self) -> usize {
        self.truth_reads.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub scene_base: u64,
    pub scenes: Vec<u64>,
    pub mask: u64,
    pub noise: u64,
    pub train: u64,
}

/// Top-level record of an output directory. Contains no timestamps, so two
/// runs of the same config produce identical manifests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub library_version: String,
    pub config_hash: String,
    pub system_hash: String,
    pub seeds: Seeds,
    pub files: Vec<FileEntry>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .collect();
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            if rel == Path::new(MANIFEST) {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.push(FileEntry {
                path: rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/"),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
    }
    Ok(())
}

/// Sorted inventory of every file under `root` except the manifest itself.
pub fn inventory(root: &Path) -> Result<Vec<FileEntry>> {
    let mut out = Vec::new();
    collect_files(root, root, &mut out)?;
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{save_container, Cube};

    #[test]
    fn guard_denies_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        assert!(DataDir::open(&layout, TruthPolicy::Allow, "eval").is_err());
        fs::create_dir_all(layout.measurement_dir()).unwrap();
        fs::create_dir_all(layout.truth_dir()).unwrap();
        save_container(layout.truth("scene_000"), &Cube::<f32>::zeros(2, 2, 1).into()).unwrap();
        save_container(layout.measurement("scene_000"), &Measurement::<f32>::zeros(2, 2).into()).unwrap();

        let denied = DataDir::open(&layout, TruthPolicy::Deny, "self_supervised").unwrap();
        assert_eq!(denied.scene_ids().unwrap(), vec!["scene_000"]);
        assert!(matches!(
            denied.truth("scene_000"),
            Err(Error::GroundTruthDenied { .. })
        ));
        assert_eq!(denied.truth_reads(), 0);
        denied.measurement("scene_000").unwrap();
        assert_eq!(denied.truth_reads(), 0);

        let allowed = DataDir::open(&layout, TruthPolicy::Allow, "eval").unwrap();
        allowed.truth("scene_000").unwrap();
        assert_eq!(allowed.truth_reads(), 1);
    }

    #[test]
    fn inventory_is_sorted_and_skips_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("b")).unwrap();
        fs::write(dir.path().join("b/z.txt"), "z").unwrap();
        fs::write(dir.path().join("a.txt"), "a").unwrap();
        fs::write(dir.path().join(MANIFEST), "{}").unwrap();
        let inv = inventory(dir.path()).unwrap();
        let paths: Vec<_> = inv.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(paths, ["a.txt", "b/z.txt"]);
        assert_eq!(inv[0].bytes, 1);
        assert_eq!(
            inv[0].sha256,
            "ca978112ca1bbdcafac231b39a23dc4da786eff8147c4e72b9807785afee48bb"
        );
    }
}
