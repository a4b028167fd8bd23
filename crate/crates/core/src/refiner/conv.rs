//! Shape-preserving 3x3 convolution (zero padding 1) on channel-major planes,
//! with the two adjoint passes needed for reverse mode.
//!
//! Weights are laid out `[cout][cin][ky][kx]`. Each kernel tap is applied as
//! a shifted row-wise axpy so the inner loops run over contiguous columns.

use crate::exec;
use crate::real::{self, Real};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub h: usize,
    pub w: usize,
}

impl Geometry {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Output rows `r` with `r + dy` inside the image, and the matching
    /// column span `[c0, c1)` with `c + dx` inside the image.
    #[inline]
    fn spans(&self, dy: isize, dx: isize) -> (usize, usize, usize, usize) {
        let (h, w) = (self.h as isize, self.w as isize);
        let r0 = (-dy).max(0);
        let r1 = (h - dy).min(h);
        let c0 = (-dx).max(0);
        let c1 = (w - dx).min(w);
        (r0 as usize, r1.max(r0) as usize, c0 as usize, c1.max(c0) as usize)
    }
}

#[inline]
fn offset(base: usize, d: isize) -> usize {
    (base as isize + d) as usize
}

/// `out[co] = bias[co] + sum_ci conv(input[ci], weight[co, ci])`
pub(crate) fn forward<T: Real>(input: &[T], cin: usize, geo: Geometry, weight: &[T], bias: &[T], out: &mut [T]) {
    let n = geo.plane();
    let w = geo.w;
    debug_assert_eq!(input.len(), cin * n);
    exec::for_each_chunk(out, n, |co, oplane| {
        oplane.fill(bias[co]);
        for ci in 0..cin {
            let iplane = &input[ci * n..(ci + 1) * n];
            let taps = &weight[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for (t, &wv) in taps.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                let (dy, dx) = (t as isize / 3 - 1, t as isize % 3 - 1);
                let (r0, r1, c0, c1) = geo.spans(dy, dx);
                for r in r0..r1 {
                    let src = offset(r, dy) * w;
                    real::axpy(
                        wv,
                        &iplane[offset(src + c0, dx)..offset(src + c1, dx)],
                        &mut oplane[r * w + c0..r * w + c1],
                    );
                }
            }
        }
    });
}

/// Gradient w.r.t. the input: `gin[ci] = sum_co conv^T(gout[co], weight[co, ci])`.
pub(crate) fn backward_input<T: Real>(gout: &[T], cout: usize, geo: Geometry, weight: &[T], cin: usize, gin: &mut [T]) {
    let n = geo.plane();
    let w = geo.w;
    exec::for_each_chunk(gin, n, |ci, gplane| {
        gplane.fill(T::zero());
        for co in 0..cout {
            let oplane = &gout[co * n..(co + 1) * n];
            let taps = &weight[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for (t, &wv) in taps.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                let (dy, dx) = (t as isize / 3 - 1, t as isize % 3 - 1);
                let (r0, r1, c0, c1) = geo.spans(dy, dx);
                for r in r0..r1 {
                    let dst = offset(r, dy) * w;
                    real::axpy(
                        wv,
                        &oplane[r * w + c0..r * w + c1],
                        &mut gplane[offset(dst + c0, dx)..offset(dst + c1, dx)],
                    );
                }
            }
        }
    });
}

/// Accumulates weight and bias gradients into `gweight` / `gbias`.
pub(crate) fn backward_params<T: Real>(
    input: &[T],
    cin: usize,
    gout: &[T],
    geo: Geometry,
    gweight: &mut [T],
    gbias: &mut [T],
) {
    let n = geo.plane();
    let w = geo.w;
    for (co, gb) in gbias.iter_mut().enumerate() {
        *gb += real::sum(&gout[co * n..(co + 1) * n]);
    }
    exec::for_each_chunk(gweight, cin * 9, |co, gw| {
        let oplane = &gout[co * n..(co + 1) * n];
        for ci in 0..cin {
            let iplane = &input[ci * n..(ci + 1) * n];
            for t in 0..9 {
                let (dy, dx) = (t as isize / 3 - 1, t as isize % 3 - 1);
                let (r0, r1, c0, c1) = geo.spans(dy, dx);
                let mut acc = T::zero();
                for r in r0..r1 {
                    let src = offset(r, dy) * w;
                    acc += real::dot(
                        &oplane[r * w + c0..r * w + c1],
                        &iplane[offset(src + c0, dx)..offset(src + c1, dx)],
                    );
                }
                gw[ci * 9 + t] += acc;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(input: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for r in 0..h {
                for c in 0..w {
                    let mut s = bias[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (rr, cc) = (r as isize + ky as isize - 1, c as isize + kx as isize - 1);
                                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                    continue;
                                }
                                s += weight[((co * cin + ci) * 3 + ky) * 3 + kx]
                                    * input[(ci * h + rr as usize) * w + cc as usize];
                            }
                        }
                    }
                    out[(co * h + r) * w + c] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_and_adjoints_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(cin, cout, h, w) in &[(1, 1, 1, 1), (2, 3, 5, 4), (3, 2, 1, 7), (2, 2, 6, 1)] {
            let geo = Geometry { h, w };
            let n = h * w;
            let input: Vec<f64> = (0..cin * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let weight: Vec<f64> = (0..cout * cin * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut out = vec![0.0; cout * n];
            forward(&input, cin, geo, &weight, &bias, &mut out);
            let reference = naive(&input, cin, h, w, &weight, &bias, cout);
            for (a, b) in out.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }

            // <conv(x), g> = <x, conv^T(g)> (bias excluded)
            let g: Vec<f64> = (0..cout * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let zero_bias = vec![0.0; cout];
            forward(&input, cin, geo, &weight, &zero_bias, &mut out);
            let mut gin = vec![0.0; cin * n];
            backward_input(&g, cout, geo, &weight, cin, &mut gin);
            let lhs: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = input.iter().zip(&gin).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);

            // <conv_w(x), g> is linear in w, so its gradient is exactly
            // d/dw_k = <conv_{e_k}(x), g>.
            let mut gw = vec![0.0; weight.len()];
            let mut gb = vec![0.0; cout];
            backward_params(&input, cin, &g, geo, &mut gw, &mut gb);
            for k in 0..weight.len() {
                let mut e = vec![0.0; weight.len()];
                e[k] = 1.0;
                forward(&input, cin, geo, &e, &zero_bias, &mut out);
                let d: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum();
                assert!((d - gw[k]).abs() < 1e-10);
            }
            for co in 0..cout {
                let s: f64 = g[co * n..(co + 1) * n].iter().sum();
                assert!((s - gb[co]).abs() < 1e-10);
            }
        }
    }
}
