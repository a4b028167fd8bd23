use std::path::Path;

use image::{GrayImage, Luma};

use crate::datamodel::SpectralCube;
use crate::error::{Error, Result};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_plane(cube: &SpectralCube, band: usize, path: &Path, f: impl Fn(f32) -> f64) -> Result<()> {
    if band >= cube.bands() {
        return Err(Error::invalid("band", format!("{band} >= {}", cube.bands())));
    }
    let plane = cube.band(band);
    let w = cube.width();
    let img = GrayImage::from_fn(w as u32, cube.height() as u32, |x, y| {
        Luma([to_u8(f(plane[y as usize * w + x as usize]))])
    });
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// 8-bit grayscale export of one band, `[0, 1]` mapped linearly to `0..=255`.
pub fn save_band_png(cube: &SpectralCube, band: usize, path: impl AsRef<Path>) -> Result<()> {
    write_plane(cube, band, path.as_ref(), |v| v as f64)
}

/// Export of a signed band (e.g. a residual) scaled symmetrically so that
/// `-m..=m` maps to `0..=255`, with `m` the band's largest magnitude.
pub fn save_signed_band_png(cube: &SpectralCube, band: usize, path: impl AsRef<Path>) -> Result<()> {
    let m = if band < cube.bands() {
        crate::datamodel::cube::max_abs(cube.band(band))
    } else {
        0.0
    };
    let scale = if m > 0.0 { 0.5 / m } else { 0.0 };
    write_plane(cube, band, path.as_ref(), |v| 0.5 + v as f64 * scale)
}
