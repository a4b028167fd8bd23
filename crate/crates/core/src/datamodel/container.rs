//! `MSIC` container: a fixed little-endian header followed by raw `f32`
//! samples.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MSIC"
//! 4       4     version (u32 LE) = 1
//! 8       1     kind (1 = cube, 2 = mask, 3 = measurement)
//! 9       12    dims H, W, B (u32 LE each; B = 1 for 2-D payloads)
//! 21      1     dtype (0 = f32 LE)
//! 22      4N    samples, (band, row, col) order, col fastest
//! ```

use std::fs;
use std::path::Path;

use crate::datamodel::{CodedMask, Measurement, SpectralCube};
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"MSIC";
pub const CONTAINER_VERSION: u32 = 1;
const HEADER_LEN: usize = 22;
const DTYPE_F32: u8 = 0;

/// Largest accepted sample count (1 GiB of payload).
pub const MAX_CONTAINER_VALUES: u64 = 1 << 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    Cube = 1,
    Mask = 2,
    Measurement = 3,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Container {
    Cube(SpectralCube),
    Mask(CodedMask),
    Measurement(Measurement<f32>),
}

impl Container {
    pub fn kind(&self) -> ContainerKind {
        match self {
            Container::Cube(_) => ContainerKind::Cube,
            Container::Mask(_) => ContainerKind::Mask,
            Container::Measurement(_) => ContainerKind::Measurement,
        }
    }
}

impl From<SpectralCube> for Container {
    fn from(c: SpectralCube) -> Self {
        Container::Cube(c)
    }
}

impl From<CodedMask> for Container {
    fn from(m: CodedMask) -> Self {
        Container::Mask(m)
    }
}

impl From<Measurement<f32>> for Container {
    fn from(m: Measurement<f32>) -> Self {
        Container::Measurement(m)
    }
}

pub fn encode_container(obj: &Container) -> Vec<u8> {
    let (dims, values): ([usize; 3], &[f32]) = match obj {
        Container::Cube(c) => ([c.height(), c.width(), c.bands()], c.data()),
        Container::Mask(m) => ([m.height(), m.width(), 1], m.values()),
        Container::Measurement(m) => ([m.height(), m.width(), 1], m.data()),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.push(obj.kind() as u8);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(DTYPE_F32);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 || &bytes[..4] != CONTAINER_MAGIC {
        return Err(Error::parse("magic", "bad magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::parse(
            "header",
            format!("truncated header ({} bytes)", bytes.len()),
        ));
    }
    let version = read_u32(bytes, 4);
    if version != CONTAINER_VERSION {
        return Err(Error::parse("version", format!("unsupported version {version}")));
    }
    let kind = match bytes[8] {
        1 => ContainerKind::Cube,
        2 => ContainerKind::Mask,
        3 => ContainerKind::Measurement,
        k => return Err(Error::parse("kind", format!("unknown kind {k}"))),
    };
    let (h, w, b) = (read_u32(bytes, 9), read_u32(bytes, 13), read_u32(bytes, 17));
    if h == 0 || w == 0 || b == 0 {
        return Err(Error::parse("dims", format!("zero dimension in {h}x{w}x{b}")));
    }
    if kind != ContainerKind::Cube && b != 1 {
        return Err(Error::parse("dims", format!("2-D payload with {b} bands")));
    }
    let count = (h as u64)
        .checked_mul(w as u64)
        .and_then(|v| v.checked_mul(b as u64))
        .filter(|&v| v <= MAX_CONTAINER_VALUES)
        .ok_or_else(|| Error::parse("dims", format!("dimension overflow for {h}x{w}x{b}")))? as usize;
    if bytes[21] != DTYPE_F32 {
        return Err(Error::parse("dtype", format!("unsupported dtype {}", bytes[21])));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < 4 * count {
        return Err(Error::parse(
            "payload",
            format!("short payload: expected {count} values, found {}", payload.len() / 4),
        ));
    }
    if payload.len() > 4 * count {
        return Err(Error::parse(
            "payload",
            format!("trailing bytes: {} beyond {count} values", payload.len() - 4 * count),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let (h, w, b) = (h as usize, w as usize, b as usize);
    Ok(match kind {
        ContainerKind::Cube => Container::Cube(SpectralCube::from_vec(h, w, b, values)?),
        ContainerKind::Mask => {
            Container::Mask(CodedMask::new(h, w, values).map_err(|e| Error::parse("payload", e.to_string()))?)
        }
        ContainerKind::Measurement => Container::Measurement(Measurement::from_vec(h, w, values)?),
    })
}

pub fn save_container(path: impl AsRef<Path>, obj: &Container) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_container(obj)).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

fn wrong_kind(expected: &str, got: ContainerKind) -> Error {
    Error::parse("kind", format!("expected {expected}, found {got:?}"))
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<SpectralCube> {
    match load_container(path)? {
        Container::Cube(c) => Ok(c),
        other => Err(wrong_kind("cube", other.kind())),
    }
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<CodedMask> {
    match load_container(path)? {
        Container::Mask(m) => Ok(m),
        other => Err(wrong_kind("mask", other.kind())),
    }
}

pub fn load_measurement(path: impl AsRef<Path>) -> Result<Measurement<f32>> {
    match load_container(path)? {
        Container::Measurement(m) => Ok(m),
        other => Err(wrong_kind("measurement", other.kind())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field_of(err: Error) -> (&'static str, String) {
        match err {
            Error::Parse { field, reason } => (field, reason),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let c = SpectralCube::from_vec(1, 2, 1, vec![1.0, -2.5]).unwrap();
        let bytes = encode_container(&c.into());
        let mut expected = b"MSIC".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0, 1, 1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn cube_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.msic");
        let c = SpectralCube::from_fn(4, 4, 2, |i, j, b| (i + 2 * j + 5 * b) as f32 * 0.03);
        save_container(&path, &c.clone().into()).unwrap();
        assert_eq!(load_cube(&path).unwrap(), c);
        assert!(load_mask(&path).is_err());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_container(&CodedMask::ones(2, 2).into());
        bytes[..4].copy_from_slice(b"XXXX");
        let (field, reason) = field_of(decode_container(&bytes).unwrap_err());
        assert_eq!(field, "magic");
        assert_eq!(reason, "bad magic");
    }

    #[test]
    fn short_payload() {
        let c = SpectralCube::zeros(4, 4, 2);
        let mut bytes = encode_container(&c.into());
        bytes.truncate(HEADER_LEN + 16 * 4);
        let (field, reason) = field_of(decode_container(&bytes).unwrap_err());
        assert_eq!(field, "payload");
        assert!(reason.starts_with("short payload"), "{reason}");
    }

    #[test]
    fn malformed_headers() {
        let good = encode_container(&Measurement::<f32>::zeros(2, 3).into());
        let mut v = good.clone();
        v[4] = 2;
        assert_eq!(field_of(decode_container(&v).unwrap_err()).0, "version");
        let mut v = good.clone();
        v[8] = 9;
        assert_eq!(field_of(decode_container(&v).unwrap_err()).0, "kind");
        let mut v = good.clone();
        v[21] = 1;
        assert_eq!(field_of(decode_container(&v).unwrap_err()).0, "dtype");
        let mut v = good.clone();
        v[9..13].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(field_of(decode_container(&v).unwrap_err()).0, "dims");
        let mut v = good.clone();
        v[9..17].copy_from_slice(&[0xff; 8]);
        let (field, reason) = field_of(decode_container(&v).unwrap_err());
        assert_eq!(field, "dims");
        assert!(reason.contains("overflow"));
        let mut v = good.clone();
        v.push(0);
        assert_eq!(field_of(decode_container(&v).unwrap_err()).0, "payload");
        assert_eq!(field_of(decode_container(&good[..10]).unwrap_err()).0, "header");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn roundtrip_is_identity(
            h in 1usize..9, w in 1usize..9, b in 1usize..5,
            raw in proptest::collection::vec(any::<u32>(), 9 * 9 * 5),
            which in 0u8..3,
        ) {
            // Arbitrary bit patterns (NaN payloads included) must survive for cubes
            // and measurements.
            let bits = |n: usize| raw[..n].iter().map(|&u| f32::from_bits(u)).collect::<Vec<_>>();
            let obj: Container = match which {
                0 => SpectralCube::from_vec(h, w, b, bits(h * w * b)).unwrap().into(),
                1 => CodedMask::new(h, w, raw[..h * w].iter().map(|&u| (u % 3) as f32 / 2.0).collect()).unwrap().into(),
                _ => Measurement::from_vec(h, w, bits(h * w)).unwrap().into(),
            };
            let bytes = encode_container(&obj);
            let back = encode_container(&decode_container(&bytes).unwrap());
            prop_assert_eq!(bytes, back);
        }
    }
}
