//! Floating-point abstraction shared by every numeric kernel.
//!
//! Production paths run in `f32`; gradient checks instantiate the same code
//! with `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// `sum(a[i] * b[i])` with eight independent accumulators so the loop
/// vectorizes without reassociating a single running sum.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += xa[k] * xb[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let pairs = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

#[inline]
pub fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut chunks = a.chunks_exact(8);
    for xa in &mut chunks {
        for k in 0..8 {
            acc[k] += xa[k];
        }
    }
    let mut tail = T::zero();
    for &x in chunks.remainder() {
        tail += x;
    }
    let pairs = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Squared L2 norm accumulated in `f64`.
pub fn norm_sq_f64<T: Real>(a: &[T]) -> f64 {
    a.iter()
        .map(|&v| {
            let v = v.to_f64_lossy();
            v * v
        })
        .sum()
}

/// Inner product accumulated in `f64`.
pub fn dot_f64<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.to_f64_lossy() * y.to_f64_lossy())
        .sum()
}
