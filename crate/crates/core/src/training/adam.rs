//! Bias-corrected Adam.

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One in-place update. `t` is the 1-based step number.
pub fn adam_update<T: Real>(params: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, hp: &AdamParams) {
    debug_assert!(t >= 1);
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let c1 = T::of(1.0 - hp.beta1.powf(t as f64));
    let c2 = T::of(1.0 - hp.beta2.powf(t as f64));
    let (lr, eps) = (T::of(hp.learning_rate), T::of(hp.eps));
    for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_learning_rate_sized() {
        let hp = AdamParams {
            learning_rate: 0.1,
            ..AdamParams::default()
        };
        let (mut p, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &hp);
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{}", p[0]);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let hp = AdamParams {
            learning_rate: 0.05,
            ..AdamParams::default()
        };
        let mut p = [3.0f64, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for t in 1..=2000 {
            let g = [2.0 * p[0], 4.0 * p[1]];
            adam_update(&mut p, &g, &mut m, &mut v, t, &hp);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }
}
