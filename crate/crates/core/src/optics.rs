//! Single-disperser coded-aperture measurement operator.
//!
//! Band `b` is modulated by the shared mask and shifted right by `d * b`
//! columns before integration on the detector:
//!
//! ```text
//! Y(i, j) = sum_b M(i, j - d b) X(i, j - d b, b)
//! ```
//!
//! Terms falling outside `[0, W)` are dropped (no wraparound). The detector
//! is therefore `W + d (B - 1)` columns wide and `H H^T` is diagonal.

use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::datamodel::{fmt_shape, CodedMask, Cube, Measurement};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SystemSpec {
    pub mask: CodedMask,
    pub shift_step: usize,
    pub noise_sigma: f64,
}

impl SystemSpec {
    pub fn new(mask: CodedMask, shift_step: usize, noise_sigma: f64) -> Result<Self> {
        if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma", format!("{noise_sigma} is not >= 0")));
        }
        Ok(SystemSpec {
            mask,
            shift_step,
            noise_sigma,
        })
    }

    pub fn measurement_width(&self, bands: usize) -> usize {
        self.mask.width() + self.shift_step * (bands.max(1) - 1)
    }

    /// Number of detector pixels `n = H (W + d (B - 1))`.
    pub fn detector_len(&self, bands: usize) -> usize {
        self.mask.height() * self.measurement_width(bands)
    }

    /// Stable content hash over the mask bits, shift step, noise level and
    /// band count.
    pub fn hash_hex(&self, bands: usize) -> String {
        let mut h = Sha256::new();
        h.update(b"cassi-system-v1");
        h.update((self.mask.height() as u64).to_le_bytes());
        h.update((self.mask.width() as u64).to_le_bytes());
        for v in self.mask.values() {
            h.update(v.to_le_bytes());
        }
        h.update((self.shift_step as u64).to_le_bytes());
        h.update(self.noise_sigma.to_le_bytes());
        h.update((bands as u64).to_le_bytes());
        hex::encode(h.finalize())
    }
}

/// The linear operator `H` for a fixed band count.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOperator {
    spec: SystemSpec,
    bands: usize,
}

impl ForwardOperator {
    pub fn new(spec: SystemSpec, bands: usize) -> Result<Self> {
        if bands == 0 {
            return Err(Error::invalid("bands", "must be >= 1"));
        }
        Ok(ForwardOperator { spec, bands })
    }

    pub fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    pub fn mask(&self) -> &CodedMask {
        &self.spec.mask
    }

    pub fn height(&self) -> usize {
        self.spec.mask.height()
    }

    pub fn width(&self) -> usize {
        self.spec.mask.width()
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn shift_step(&self) -> usize {
        self.spec.shift_step
    }

    pub fn measurement_width(&self) -> usize {
        self.spec.measurement_width(self.bands)
    }

    pub fn cube_shape(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.bands)
    }

    pub fn check_cube<T: Real>(&self, x: &Cube<T>) -> Result<()> {
        if x.shape() != self.cube_shape() {
            return Err(Error::shape(
                "cube vs operator",
                fmt_shape(self.cube_shape()),
                fmt_shape(x.shape()),
            ));
        }
        Ok(())
    }

    pub fn check_measurement<T: Real>(&self, y: &Measurement<T>) -> Result<()> {
        if y.height() != self.height() || y.width() != self.measurement_width() {
            return Err(Error::shape(
                "measurement vs operator",
                format!("{}x{}", self.height(), self.measurement_width()),
                format!("{}x{}", y.height(), y.width()),
            ));
        }
        Ok(())
    }

    /// `y = H x`
    pub fn forward<T: Real>(&self, x: &Cube<T>) -> Result<Measurement<T>> {
        self.check_cube(x)?;
        let (h, w, d) = (self.height(), self.width(), self.shift_step());
        let mut y = Measurement::zeros(h, self.measurement_width());
        for b in 0..self.bands {
            let plane = x.band(b);
            for i in 0..h {
                let mrow = self.mask().row(i);
                let xrow = &plane[i * w..(i + 1) * w];
                let yrow = &mut y.row_mut(i)[d * b..d * b + w];
                for ((yv, &m), &xv) in yrow.iter_mut().zip(mrow).zip(xrow) {
                    *yv += T::of(m as f64) * xv;
                }
            }
        }
        Ok(y)
    }

    /// `x = H^T y`, i.e. `x(i, j, b) = M(i, j) y(i, j + d b)`.
    pub fn adjoint<T: Real>(&self, y: &Measurement<T>) -> Result<Cube<T>> {
        self.check_measurement(y)?;
        let (h, w, d) = (self.height(), self.width(), self.shift_step());
        let mut x = Cube::zeros(h, w, self.bands);
        for b in 0..self.bands {
            let plane = x.band_mut(b);
            for i in 0..h {
                let mrow = self.mask().row(i);
                let yrow = &y.row(i)[d * b..d * b + w];
                let xrow = &mut plane[i * w..(i + 1) * w];
                for ((xv, &m), &yv) in xrow.iter_mut().zip(mrow).zip(yrow) {
                    *xv = T::of(m as f64) * yv;
                }
            }
        }
        Ok(x)
    }

    /// Diagonal of `H H^T`: `D(i, j) = sum_b M(i, j - d b)^2`.
    pub fn gram_diagonal<T: Real>(&self) -> Measurement<T> {
        let (h, w, d) = (self.height(), self.width(), self.shift_step());
        let mut g = Measurement::zeros(h, self.measurement_width());
        for b in 0..self.bands {
            for i in 0..h {
                let mrow = self.mask().row(i);
                let grow = &mut g.row_mut(i)[d * b..d * b + w];
                for (gv, &m) in grow.iter_mut().zip(mrow) {
                    let m = T::of(m as f64);
                    *gv += m * m;
                }
            }
        }
        g
    }

    /// `max(D, eps)` reciprocal, used by the normalized adjoint and GAP.
    pub fn inverse_gram_floor<T: Real>(&self, eps: f64) -> Measurement<T> {
        let mut g = self.gram_diagonal::<T>();
        let eps = T::of(eps);
        for v in g.data_mut() {
            *v = T::one() / (*v).max(eps);
        }
        g
    }
}

/// `y + sigma g`, `g` i.i.d. standard normal, deterministic in `seed`.
pub fn add_noise<T: Real>(y: &Measurement<T>, sigma: f64, seed: u64) -> Result<Measurement<T>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid("sigma", format!("{sigma} is not >= 0")));
    }
    let mut out = y.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = rng::stream(seed, &[0x0015E]);
    for v in out.data_mut() {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v += T::of(sigma * g);
    }
    Ok(out)
}
