//! Training checkpoints and the loss-history CSV.
//!
//! A checkpoint named `stem` is three files in one directory:
//! `stem.rfn` (refiner weights), `stem.adam` (first then second Adam moments
//! as f32 LE) and `stem.json` (the sidecar below).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refiner::{load_model, save_model, RefinerArch};
use crate::training::{LossRow, TrainConfig, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSidecar {
    pub train_config: TrainConfig,
    pub arch: RefinerArch,
    pub step: u64,
    pub model_file: String,
    pub adam_moments_file: String,
}

fn with_ext(dir: &Path, stem: &str, ext: &str) -> PathBuf {
    dir.join(format!("{stem}.{ext}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the checkpoint files and returns the sidecar path.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    stem: &str,
    state: &TrainState<f32>,
    config: &TrainConfig,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model_path = with_ext(dir, stem, "rfn");
    save_model(&model_path, &state.model)?;

    let mut blob = Vec::with_capacity(8 * state.adam_m.len());
    for v in state.adam_m.iter().chain(&state.adam_v) {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    write(&with_ext(dir, stem, "adam"), &blob)?;

    let sidecar = CheckpointSidecar {
        train_config: config.clone(),
        arch: *state.model.arch(),
        step: state.step,
        model_file: format!("{stem}.rfn"),
        adam_moments_file: format!("{stem}.adam"),
    };
    let json_path = with_ext(dir, stem, "json");
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    write(&json_path, text.as_bytes())?;
    Ok(json_path)
}

/// Restores model, moments and step counter from a sidecar path. The loss
/// history is left empty; callers restore it from the loss CSV.
pub fn load_checkpoint(sidecar_path: impl AsRef<Path>) -> Result<(TrainState<f32>, CheckpointSidecar)> {
    let path = sidecar_path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sidecar: CheckpointSidecar =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let model = load_model(dir.join(&sidecar.model_file))?;
    if *model.arch() != sidecar.arch {
        return Err(Error::ArchMismatch {
            expected: sidecar.arch.to_string(),
            found: model.arch().to_string(),
        });
    }
    let moments_path = dir.join(&sidecar.adam_moments_file);
    let blob = fs::read(&moments_path).map_err(|e| Error::io(&moments_path, e))?;
    let n = model.params().len();
    if blob.len() != 8 * n {
        return Err(Error::parse(
            "payload",
            format!("adam moments: expected {} bytes, found {}", 8 * n, blob.len()),
        ));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::parse("payload", "non-finite Adam moment"));
    }
    let (m, v) = values.split_at(n);
    let state = TrainState {
        model,
        adam_m: m.to_vec(),
        adam_v: v.to_vec(),
        step: sidecar.step,
        history: Vec::new(),
    };
    Ok((state, sidecar))
}

/// `step,l_mc,l_ec,l_total`, one row per step. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_loss_csv(path: impl AsRef<Path>, rows: &[LossRow]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(["step", "l_mc", "l_ec", "l_total"]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<LossRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::parse("loss_csv", e.to_string())))
        .collect()
}
