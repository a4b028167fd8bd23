//! Frozen initial predictors.
//!
//! Both predictors are deterministic functions of `(y, H)` with no trainable
//! state; their output is cached once per scene and treated as a constant
//! during refiner training.

mod cache;
mod tv;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{Cube, Measurement};
use crate::error::{Error, Result};
use crate::exec;
use crate::optics::ForwardOperator;
use crate::real::Real;

pub use cache::{cache_init, CacheManifest, CacheStats, CACHE_MANIFEST};
pub use tv::{tv_denoise, CHAMBOLLE_STEP};

/// Floor on the Gram diagonal so masked-out detector columns do not divide by zero.
pub const GRAM_EPS: f64 = 1e-6;

/// A frozen reconstruction `(y, H) -> x_init`.
pub trait InitialPredict: Sync {
    fn predict<T: Real>(&self, y: &Measurement<T>, op: &ForwardOperator) -> Result<Cube<T>>;

    /// Stable identifier of the predictor configuration (used as cache key).
    fn fingerprint(&self) -> String;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    AdjointBaseline,
    GapTv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialPredictor {
    pub kind: PredictorKind,
    #[serde(default = "defaults::gap_iterations")]
    pub gap_iterations: usize,
    #[serde(default = "defaults::tv_weight")]
    pub tv_weight: f64,
    #[serde(default = "defaults::tv_inner_iterations")]
    pub tv_inner_iterations: usize,
}

mod defaults {
    pub fn gap_iterations() -> usize {
        30
    }
    pub fn tv_weight() -> f64 {
        0.05
    }
    pub fn tv_inner_iterations() -> usize {
        20
    }
}

impl InitialPredictor {
    pub fn adjoint_baseline() -> Self {
        InitialPredictor {
            kind: PredictorKind::AdjointBaseline,
            gap_iterations: defaults::gap_iterations(),
            tv_weight: defaults::tv_weight(),
            tv_inner_iterations: defaults::tv_inner_iterations(),
        }
    }

    pub fn gap_tv(iterations: usize, tv_weight: f64, tv_inner_iterations: usize) -> Self {
        InitialPredictor {
            kind: PredictorKind::GapTv,
            gap_iterations: iterations,
            tv_weight,
            tv_inner_iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == PredictorKind::GapTv && self.gap_iterations == 0 {
            return Err(Error::invalid("gap_iterations", "must be >= 1"));
        }
        if !(self.tv_weight.is_finite() && self.tv_weight >= 0.0) {
            return Err(Error::invalid("tv_weight", format!("{} is not >= 0", self.tv_weight)));
        }
        Ok(())
    }

    /// Predicts every measurement, in parallel across scenes.
    pub fn predict_all(&self, ys: &[Measurement<f32>], op: &ForwardOperator) -> Result<Vec<Cube<f32>>> {
        exec::map(ys, |y| self.predict(y, op)).into_iter().collect()
    }
}

impl InitialPredict for InitialPredictor {
    fn predict<T: Real>(&self, y: &Measurement<T>, op: &ForwardOperator) -> Result<Cube<T>> {
        self.validate()?;
        match self.kind {
            PredictorKind::AdjointBaseline => adjoint_baseline(y, op),
            PredictorKind::GapTv => gap_tv_solve(y, op, self.gap_iterations, self.tv_weight, self.tv_inner_iterations),
        }
    }

    fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("predictor serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// `x(i, j, b) = (H^T y)(i, j, b) / max(D(i, j + d b), eps)`, clipped to `[0, 1]`.
pub fn adjoint_baseline<T: Real>(y: &Measurement<T>, op: &ForwardOperator) -> Result<Cube<T>> {
    Ok(normalized_adjoint(y, op)?.clip_unit())
}

/// `H^T (y / max(D, eps))` without clipping.
pub fn normalized_adjoint<T: Real>(y: &Measurement<T>, op: &ForwardOperator) -> Result<Cube<T>> {
    op.check_measurement(y)?;
    let inv = op.inverse_gram_floor::<T>(GRAM_EPS);
    let scaled: Vec<T> = y.data().iter().zip(inv.data()).map(|(&a, &b)| a * b).collect();
    op.adjoint(&Measurement::from_vec(y.height(), y.width(), scaled)?)
}

/// GAP-TV with a Chambolle TV denoiser; see [`gap_tv_iterate`].
pub fn gap_tv_solve<T: Real>(
    y: &Measurement<T>,
    op: &ForwardOperator,
    iterations: usize,
    tv_weight: f64,
    tv_inner_iterations: usize,
) -> Result<Cube<T>> {
    Ok(gap_tv_iterate(y, op, None, iterations, tv_weight, tv_inner_iterations, |_, _| {})?.clip_unit())
}

/// Generalized alternating projection:
///
/// ```text
/// x <- v + H^T [(y - H v) / max(D, eps)]
/// v <- TV_denoise(x)            (per band)
/// ```
///
/// starting from `start`, or the normalized-adjoint estimate when `None`.
/// `observe(k, v)` sees each
/// unclipped iterate `v^k`, `k = 1..=iterations`. Returns the last unclipped
/// iterate.
pub fn gap_tv_iterate<T: Real>(
    y: &Measurement<T>,
    op: &ForwardOperator,
    start: Option<&Cube<T>>,
    iterations: usize,
    tv_weight: f64,
    tv_inner_iterations: usize,
    mut observe: impl FnMut(usize, &Cube<T>),
) -> Result<Cube<T>> {
    if iterations == 0 {
        return Err(Error::invalid("iterations", "must be >= 1"));
    }
    let inv = op.inverse_gram_floor::<T>(GRAM_EPS);
    let mut v = match start {
        Some(v0) => {
            op.check_cube(v0)?;
            v0.clone()
        }
        None => adjoint_baseline(y, op)?,
    };
    for k in 1..=iterations {
        let residual = y.sub(&op.forward(&v)?)?;
        let scaled: Vec<T> = residual.data().iter().zip(inv.data()).map(|(&a, &b)| a * b).collect();
        let correction = op.adjoint(&Measurement::from_vec(y.height(), y.width(), scaled)?)?;
        let mut x = v.add(&correction)?;
        if tv_weight > 0.0 {
            let plane = x.plane_len();
            let (h, w) = (x.height(), x.width());
            exec::for_each_chunk(x.data_mut(), plane, |_, band| {
                tv_denoise(band, h, w, tv_weight, tv_inner_iterations);
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite {
                context: "gap-tv",
                iteration: k,
                max_abs: x.max_abs(),
            });
        }
        v = x;
        observe(k, &v);
    }
    Ok(v)
}
