use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{self, Real};

/// Dense `H x W x B` spectral cube, band-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Cube<T = f32> {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<T>,
}

pub type SpectralCube = Cube<f32>;

impl<T: Real> Cube<T> {
    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        Self::filled(height, width, bands, T::zero())
    }

    pub fn filled(height: usize, width: usize, bands: usize, value: T) -> Self {
        assert!(height >= 1 && width >= 1 && bands >= 1, "empty cube");
        Cube {
            height,
            width,
            bands,
            data: vec![value; height * width * bands],
        }
    }

    pub fn from_vec(height: usize, width: usize, bands: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::shape(
                "cube",
                "non-zero dimensions",
                format!("{height}x{width}x{bands}"),
            ));
        }
        if data.len() != height * width * bands {
            return Err(Error::shape(
                "cube",
                height * width * bands,
                format!("{} values", data.len()),
            ));
        }
        Ok(Cube {
            height,
            width,
            bands,
            data,
        })
    }

    /// Builds a cube from a closure over `(row, col, band)`.
    pub fn from_fn(height: usize, width: usize, bands: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut c = Self::zeros(height, width, bands);
        for b in 0..bands {
            for i in 0..height {
                for j in 0..width {
                    c.data[(b * height + i) * width + j] = f(i, j, b);
                }
            }
        }
        c
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, band: usize) -> usize {
        (band * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> T {
        self.data[self.index(row, col, band)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, band: usize, v: T) {
        let k = self.index(row, col, band);
        self.data[k] = v;
    }

    pub fn band(&self, b: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn same_shape<U: Real>(&self, other: &Cube<U>) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_shape<U: Real>(&self, other: &Cube<U>, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(context, fmt_shape(self.shape()), fmt_shape(other.shape())))
        }
    }

    pub fn cast<U: Real>(&self) -> Cube<U> {
        Cube {
            height: self.height,
            width: self.width,
            bands: self.bands,
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Cube {
            height: self.height,
            width: self.width,
            bands: self.bands,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_shape(other, "elementwise")?;
        Ok(Cube {
            height: self.height,
            width: self.width,
            bands: self.bands,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn clip_unit(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub fn norm_sq(&self) -> f64 {
        real::norm_sq_f64(&self.data)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        real::dot_f64(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.data)
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Mean value of each band.
    pub fn band_means(&self) -> Vec<f64> {
        (0..self.bands)
            .map(|b| self.band(b).iter().map(|v| v.to_f64_lossy()).sum::<f64>() / self.plane_len() as f64)
            .collect()
    }
}

pub(crate) fn max_abs<T: Real>(data: &[T]) -> f64 {
    data.iter().fold(0.0f64, |m, v| {
        let a = v.to_f64_lossy().abs();
        if a.is_nan() || m.is_nan() {
            f64::NAN
        } else {
            m.max(a)
        }
    })
}

pub(crate) fn fmt_shape((h, w, b): (usize, usize, usize)) -> String {
    format!("{h}x{w}x{b}")
}

/// 2-D coded snapshot of size `H x (W + d (B - 1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement<T = f32> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Measurement<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "empty measurement");
        Measurement {
            height,
            width,
            data: vec![T::zero(); height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(
                "measurement",
                format!("{height}x{width} (non-empty)"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Measurement { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Extended width `W + d (B - 1)`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.width..(i + 1) * self.width]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.width + j]
    }

    pub fn cast<U: Real>(&self) -> Measurement<U> {
        Measurement {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                "measurement difference",
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(Measurement {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        })
    }

    pub fn norm_sq(&self) -> f64 {
        real::norm_sq_f64(&self.data)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        real::dot_f64(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Coded aperture with transmission values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodedMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl CodedMask {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{height}x{width} (non-empty)"),
                format!("{} values", values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("mask", format!("value {v} outside [0, 1]")));
        }
        Ok(CodedMask { height, width, values })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1.0)
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self::new(height, width, vec![v; height * width]).expect("valid constant mask")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.width + j]
    }

    pub fn fraction_ones(&self) -> f64 {
        self.values.iter().filter(|&&v| v == 1.0).count() as f64 / self.values.len() as f64
    }
}
