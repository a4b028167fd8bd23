//! Refiner checkpoint: `"RFN1"`, then `bands`, `hidden_channels`,
//! `num_res_blocks` as u32 LE, then every parameter as f32 LE in canonical
//! layout.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::refiner::{RefinerArch, RefinerModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFN1";
const HEADER_LEN: usize = 16;

pub fn encode_model(model: &RefinerModel<f32>) -> Vec<u8> {
    let a = model.arch();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * model.params().len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [a.bands, a.hidden_channels, a.num_res_blocks] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<RefinerModel<f32>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::parse("magic", "bad magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::parse("header", "truncated header"));
    }
    let field = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
    let arch = RefinerArch {
        bands: field(0),
        hidden_channels: field(1),
        num_res_blocks: field(2),
    };
    arch.validate().map_err(|e| Error::parse("arch", e.to_string()))?;
    let count = arch
        .checked_parameter_count()
        .ok_or_else(|| Error::parse("arch", "parameter count overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if Some(payload.len()) != count.checked_mul(4) {
        return Err(Error::parse(
            "payload",
            format!("expected {count} parameters, found {} bytes", payload.len()),
        ));
    }
    let params = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    RefinerModel::from_params(arch, params)
}

pub fn save_model(path: impl AsRef<Path>, model: &RefinerModel<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<RefinerModel<f32>> {
    let path = path.as_ref();
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and refuses it unless its architecture is `expected`.
pub fn load_model_expect(path: impl AsRef<Path>, expected: &RefinerArch) -> Result<RefinerModel<f32>> {
    let m = load_model(path)?;
    if m.arch() != expected {
        return Err(Error::ArchMismatch {
            expected: expected.to_string(),
            found: m.arch().to_string(),
        });
    }
    Ok(m)
}
