//! Synthetic multispectral scenes and coded masks.
//!
//! A scene is a sum of isotropic 2-D Gaussian blobs. Each blob carries its own
//! spectral signature: a floor plus a Gaussian bump centred at a random
//! position along the band axis, so neighbouring bands are strongly
//! correlated while different blobs remain spectrally distinct.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{CodedMask, SpectralCube};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub num_blobs: usize,
    pub rng_seed: u64,
    /// Blob radius as a fraction of the shorter image side.
    #[serde(default = "SceneSpec::default_smoothness")]
    pub smoothness: f64,
}

impl SceneSpec {
    fn default_smoothness() -> f64 {
        0.15
    }

    pub fn new(height: usize, width: usize, bands: usize, num_blobs: usize, rng_seed: u64) -> Self {
        SceneSpec {
            height,
            width,
            bands,
            num_blobs,
            rng_seed,
            smoothness: Self::default_smoothness(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::invalid("scene", "height, width and bands must be >= 1"));
        }
        if !(self.smoothness.is_finite() && self.smoothness > 0.0) {
            return Err(Error::invalid("smoothness", format!("{} is not > 0", self.smoothness)));
        }
        Ok(())
    }
}

struct Blob {
    row: f64,
    col: f64,
    inv_two_var: f64,
    amplitude: f64,
    spectral_centre: f64,
    inv_two_spectral_var: f64,
}

impl Blob {
    fn spectral_weight(&self, t: f64) -> f64 {
        let dt = t - self.spectral_centre;
        0.3 + 0.7 * (-dt * dt * self.inv_two_spectral_var).exp()
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SpectralCube> {
    spec.validate()?;
    let (h, w, nb) = (spec.height, spec.width, spec.bands);
    let mut rng = rng::stream(spec.rng_seed, &[0x5CE4E]);
    let side = h.min(w) as f64;
    let blobs: Vec<Blob> = (0..spec.num_blobs)
        .map(|_| {
            let sigma = spec.smoothness * side * rng.gen_range(0.5..1.5);
            let spectral_sigma: f64 = rng.gen_range(0.15..0.5);
            Blob {
                row: rng.gen_range(0.0..h as f64),
                col: rng.gen_range(0.0..w as f64),
                inv_two_var: 1.0 / (2.0 * sigma * sigma),
                amplitude: rng.gen_range(0.4..1.0),
                spectral_centre: rng.gen_range(0.0..1.0),
                inv_two_spectral_var: 1.0 / (2.0 * spectral_sigma * spectral_sigma),
            }
        })
        .collect();

    let mut cube = SpectralCube::zeros(h, w, nb);
    let mut spatial = vec![0.0f64; h * w];
    for blob in &blobs {
        for i in 0..h {
            let di = i as f64 + 0.5 - blob.row;
            for j in 0..w {
                let dj = j as f64 + 0.5 - blob.col;
                spatial[i * w + j] = blob.amplitude * (-(di * di + dj * dj) * blob.inv_two_var).exp();
            }
        }
        for b in 0..nb {
            let weight = blob.spectral_weight((b as f64 + 0.5) / nb as f64);
            for (v, &s) in cube.band_mut(b).iter_mut().zip(&spatial) {
                *v = (*v as f64 + weight * s) as f32;
            }
        }
    }
    Ok(cube.clip_unit())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Bernoulli,
    AllOnes,
}

pub fn generate_mask(height: usize, width: usize, kind: MaskKind, p: f64, rng_seed: u64) -> Result<CodedMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("p", format!("{p} outside [0, 1]")));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("mask", "height and width must be >= 1"));
    }
    let values = match kind {
        MaskKind::AllOnes => vec![1.0; height * width],
        MaskKind::Bernoulli => {
            let mut rng = rng::stream(rng_seed, &[0x3A5C]);
            (0..height * width)
                .map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
                .collect()
        }
    };
    CodedMask::new(height, width, values)
}
