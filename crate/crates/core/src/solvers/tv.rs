//! Chambolle's dual projection for isotropic 2-D TV denoising:
//!
//! ```text
//! argmin_u  1/2 |u - f|^2 + lambda TV(u)
//! ```
//!
//! Forward differences with Neumann boundary; `div = -grad^T`.

use crate::real::Real;

/// Dual step size, just below the empirical stability limit of 1/4.
pub const CHAMBOLLE_STEP: f64 = 0.248;

/// Denoises one `h x w` plane in place.
pub fn tv_denoise<T: Real>(plane: &mut [T], h: usize, w: usize, weight: f64, iterations: usize) {
    debug_assert_eq!(plane.len(), h * w);
    if weight <= 0.0 || iterations == 0 {
        return;
    }
    let n = h * w;
    let lambda = T::of(weight);
    let inv_lambda = T::one() / lambda;
    let tau = T::of(CHAMBOLLE_STEP);
    let mut px = vec![T::zero(); n];
    let mut py = vec![T::zero(); n];
    let mut term = vec![T::zero(); n];

    for _ in 0..iterations {
        divergence(&px, &py, h, w, &mut term);
        for (t, &f) in term.iter_mut().zip(plane.iter()) {
            *t -= f * inv_lambda;
        }
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                let gx = if j + 1 < w { term[k + 1] - term[k] } else { T::zero() };
                let gy = if i + 1 < h { term[k + w] - term[k] } else { T::zero() };
                let denom = T::one() + tau * (gx * gx + gy * gy).sqrt();
                px[k] = (px[k] + tau * gx) / denom;
                py[k] = (py[k] + tau * gy) / denom;
            }
        }
    }
    divergence(&px, &py, h, w, &mut term);
    for (u, &dv) in plane.iter_mut().zip(&term) {
        *u -= lambda * dv;
    }
}

fn divergence<T: Real>(px: &[T], py: &[T], h: usize, w: usize, out: &mut [T]) {
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let mut d = T::zero();
            if j + 1 < w {
                d += px[k];
            }
            if j > 0 {
                d -= px[k - 1];
            }
            if i + 1 < h {
                d += py[k];
            }
            if i > 0 {
                d -= py[k - w];
            }
            out[k] = d;
        }
    }
}
