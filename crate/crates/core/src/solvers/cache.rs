//! On-disk cache of initial predictions.
//!
//! Layout: one `init_<scene-id>.msic` cube per scene plus `init_manifest.json`
//! recording the system hash and predictor fingerprint the cubes were
//! computed for. A manifest that does not match the current system is an
//! error; the caller decides whether to wipe the directory and rebuild.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{load_cube, save_container, Measurement, SpectralCube};
use crate::error::{Error, Result};
use crate::exec;
use crate::optics::ForwardOperator;
use crate::solvers::InitialPredict;

pub const CACHE_MANIFEST: &str = "init_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub system_hash: String,
    pub predictor: String,
    pub scenes: BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    /// Number of predictor invocations.
    pub predicted: usize,
    pub loaded: usize,
}

fn entry_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("init_{id}.msic"))
}

fn stale(dir: &Path, reason: impl Into<String>) -> Error {
    Error::RebuildRequired {
        path: dir.to_path_buf(),
        reason: reason.into(),
    }
}

/// Returns `x_init` for every `(scene id, measurement)` pair, predicting and
/// persisting only scenes missing from the cache.
pub fn cache_init<P: InitialPredict>(
    dir: impl AsRef<Path>,
    predictor: &P,
    op: &ForwardOperator,
    scenes: &[(String, Measurement<f32>)],
) -> Result<(Vec<SpectralCube>, CacheStats)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(CACHE_MANIFEST);
    let expected = CacheManifest {
        system_hash: op.spec().hash_hex(op.bands()),
        predictor: predictor.fingerprint(),
        scenes: BTreeSet::new(),
    };

    let mut manifest = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: CacheManifest =
            serde_json::from_str(&text).map_err(|e| stale(dir, format!("unreadable manifest: {e}")))?;
        if m.system_hash != expected.system_hash {
            return Err(stale(dir, "system spec changed"));
        }
        if m.predictor != expected.predictor {
            return Err(stale(dir, "predictor changed"));
        }
        m
    } else {
        expected
    };

    let mut stats = CacheStats::default();
    let mut out: Vec<Option<SpectralCube>> = vec![None; scenes.len()];
    let mut missing = Vec::new();
    for (k, (id, y)) in scenes.iter().enumerate() {
        op.check_measurement(y)?;
        let path = entry_path(dir, id);
        if manifest.scenes.contains(id) && path.exists() {
            let cube = load_cube(&path)?;
            if cube.shape() != op.cube_shape() {
                return Err(stale(dir, format!("scene {id} has shape {:?}", cube.shape())));
            }
            out[k] = Some(cube);
            stats.loaded += 1;
        } else {
            missing.push(k);
        }
    }

    let predicted = exec::map(&missing, |&k| predictor.predict(&scenes[k].1, op));
    for (&k, cube) in missing.iter().zip(predicted) {
        let cube = cube?;
        let id = &scenes[k].0;
        save_container(entry_path(dir, id), &cube.clone().into())?;
        manifest.scenes.insert(id.clone());
        out[k] = Some(cube);
        stats.predicted += 1;
    }
    if stats.predicted > 0 || !manifest_path.exists() {
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok((out.into_iter().map(|c| c.expect("filled")).collect(), stats))
}
