//! Cube-, mask- and measurement-shaped values, synthetic scenes and the
//! `MSIC` container format.
//!
//! Cubes are stored band-major: index `(band, row, col)` with `col` fastest.
//! Intensities are normalized to `[0, 1]`.

mod container;
mod cube;
mod png;
mod scene;

pub use container::{
    decode_container, encode_container, load_container, load_cube, load_mask, load_measurement, save_container,
    Container, ContainerKind, CONTAINER_MAGIC, CONTAINER_VERSION, MAX_CONTAINER_VALUES,
};
pub(crate) use cube::{fmt_shape, max_abs};
pub use cube::{CodedMask, Cube, Measurement, SpectralCube};
pub use png::{save_band_png, save_signed_band_png};
pub use scene::{generate_mask, generate_scene, MaskKind, SceneSpec};
