//! One-step residual generator.
//!
//! A small fully convolutional network maps the concatenation of the initial
//! estimate and a noise cube (`2B` channels) to a residual with `B` channels
//! in a single pass:
//!
//! ```text
//! h0 = relu(conv_head([x_init, z]))                  2B -> C
//! h_{k+1} = h_k + conv_k2(relu(conv_k1(h_k)))        C -> C, k = 0..K
//! r = conv_tail(h_K)                                 C -> B
//! ```
//!
//! All convolutions are 3x3 with zero padding 1. The tail is zero-initialized
//! so a fresh model returns `r = 0`. Reverse-mode gradients are written by
//! hand; only parameter gradients are produced.

mod checkpoint;
mod conv;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{fmt_shape, Cube};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;
use conv::Geometry;

pub use checkpoint::{decode_model, encode_model, load_model, load_model_expect, save_model, CHECKPOINT_MAGIC};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerArch {
    pub bands: usize,
    pub hidden_channels: usize,
    pub num_res_blocks: usize,
}

/// Parameter block of one convolution inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayout {
    pub cin: usize,
    pub cout: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl ConvLayout {
    pub fn weight_len(&self) -> usize {
        9 * self.cin * self.cout
    }

    pub fn end(&self) -> usize {
        self.bias_offset + self.cout
    }
}

impl RefinerArch {
    pub fn new(bands: usize, hidden_channels: usize, num_res_blocks: usize) -> Result<Self> {
        let a = RefinerArch {
            bands,
            hidden_channels,
            num_res_blocks,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.hidden_channels == 0 {
            return Err(Error::invalid("refiner", "bands and hidden_channels must be >= 1"));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        2 * self.bands
    }

    /// `9 2B C + C + K 2 (9 C^2 + C) + 9 C B + B`
    pub fn parameter_count(&self) -> usize {
        let (b, c, k) = (self.bands, self.hidden_channels, self.num_res_blocks);
        9 * 2 * b * c + c + k * 2 * (9 * c * c + c) + 9 * c * b + b
    }

    pub(crate) fn checked_parameter_count(&self) -> Option<usize> {
        let (b, c, k) = (self.bands, self.hidden_channels, self.num_res_blocks);
        let head = b.checked_mul(18)?.checked_mul(c)?.checked_add(c)?;
        let block = c.checked_mul(c)?.checked_mul(9)?.checked_add(c)?.checked_mul(2)?;
        let tail = c.checked_mul(9)?.checked_mul(b)?.checked_add(b)?;
        head.checked_add(block.checked_mul(k)?)?.checked_add(tail)
    }

    /// Head, then `conv1, conv2` of each block, then tail.
    pub fn layers(&self) -> Vec<ConvLayout> {
        let c = self.hidden_channels;
        let mut shapes = vec![(self.input_channels(), c)];
        for _ in 0..self.num_res_blocks {
            shapes.push((c, c));
            shapes.push((c, c));
        }
        shapes.push((c, self.bands));
        let mut off = 0;
        shapes
            .into_iter()
            .map(|(cin, cout)| {
                let l = ConvLayout {
                    cin,
                    cout,
                    weight_offset: off,
                    bias_offset: off + 9 * cin * cout,
                };
                off = l.end();
                l
            })
            .collect()
    }
}

impl std::fmt::Display for RefinerArch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "B={} C={} K={}",
            self.bands, self.hidden_channels, self.num_res_blocks
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerModel<T = f32> {
    arch: RefinerArch,
    params: Vec<T>,
}

/// Activations kept from a forward pass for the reverse pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    geo: (usize, usize),
    input: Vec<T>,
    /// `h0`, then for each block its inner activation and output.
    hidden: Vec<Vec<T>>,
}

impl<T: Real> RefinerModel<T> {
    /// He-normal weights for the head and blocks, zero biases, zero tail.
    pub fn init(arch: RefinerArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![T::zero(); arch.parameter_count()];
        let layers = arch.layers();
        let mut rng = rng::stream(seed, &[0x1417]);
        for l in &layers[..layers.len() - 1] {
            let std = (2.0 / (9.0 * l.cin as f64)).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            for p in &mut params[l.weight_offset..l.bias_offset] {
                *p = T::of(normal.sample(&mut rng));
            }
        }
        Ok(RefinerModel { arch, params })
    }

    pub fn from_params(arch: RefinerArch, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.parameter_count() {
            return Err(Error::ArchMismatch {
                expected: format!("{arch} ({} parameters)", arch.parameter_count()),
                found: format!("{} parameters", params.len()),
            });
        }
        Ok(RefinerModel { arch, params })
    }

    pub fn arch(&self) -> &RefinerArch {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> RefinerModel<U> {
        RefinerModel {
            arch: self.arch,
            params: self.params.iter().map(|&p| U::of(p.to_f64_lossy())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_inputs(&self, z: &Cube<T>, x_init: &Cube<T>) -> Result<()> {
        if x_init.bands() != self.arch.bands {
            return Err(Error::shape("refiner input bands", self.arch.bands, x_init.bands()));
        }
        if z.shape() != x_init.shape() {
            return Err(Error::shape(
                "noise vs x_init",
                fmt_shape(x_init.shape()),
                fmt_shape(z.shape()),
            ));
        }
        Ok(())
    }

    fn layer(&self, l: &ConvLayout) -> (&[T], &[T]) {
        (
            &self.params[l.weight_offset..l.bias_offset],
            &self.params[l.bias_offset..l.end()],
        )
    }

    /// Residual `r = f(z, x_init)`.
    pub fn forward(&self, z: &Cube<T>, x_init: &Cube<T>) -> Result<Cube<T>> {
        Ok(self.forward_traced(z, x_init)?.0)
    }

    pub fn forward_traced(&self, z: &Cube<T>, x_init: &Cube<T>) -> Result<(Cube<T>, Trace<T>)> {
        self.check_inputs(z, x_init)?;
        let (h, w, b) = x_init.shape();
        let geo = Geometry { h, w };
        let n = geo.plane();
        let c = self.arch.hidden_channels;
        let layers = self.arch.layers();

        let mut input = Vec::with_capacity(2 * b * n);
        input.extend_from_slice(x_init.data());
        input.extend_from_slice(z.data());

        let mut hidden = Vec::with_capacity(1 + 2 * self.arch.num_res_blocks);
        let mut h0 = vec![T::zero(); c * n];
        let (wt, bs) = self.layer(&layers[0]);
        conv::forward(&input, 2 * b, geo, wt, bs, &mut h0);
        relu(&mut h0);
        hidden.push(h0);

        for k in 0..self.arch.num_res_blocks {
            let prev = hidden.last().expect("h_k");
            let mut a = vec![T::zero(); c * n];
            let (wt, bs) = self.layer(&layers[1 + 2 * k]);
            conv::forward(prev, c, geo, wt, bs, &mut a);
            relu(&mut a);
            let mut next = vec![T::zero(); c * n];
            let (wt, bs) = self.layer(&layers[2 + 2 * k]);
            conv::forward(&a, c, geo, wt, bs, &mut next);
            for (o, &p) in next.iter_mut().zip(prev) {
                *o += p;
            }
            hidden.push(a);
            hidden.push(next);
        }

        let mut out = vec![T::zero(); b * n];
        let (wt, bs) = self.layer(layers.last().expect("tail"));
        conv::forward(hidden.last().expect("h_K"), c, geo, wt, bs, &mut out);
        let r = Cube::from_vec(h, w, b, out)?;
        Ok((
            r,
            Trace {
                geo: (h, w),
                input,
                hidden,
            },
        ))
    }

    /// Gradient of `<upstream, f(z, x_init)>` w.r.t. the parameters, using
    /// activations from [`RefinerModel::forward_traced`].
    pub fn backward(&self, trace: &Trace<T>, upstream: &Cube<T>) -> Result<Vec<T>> {
        let (h, w) = trace.geo;
        if upstream.shape() != (h, w, self.arch.bands) {
            return Err(Error::shape(
                "refiner upstream gradient",
                fmt_shape((h, w, self.arch.bands)),
                fmt_shape(upstream.shape()),
            ));
        }
        let geo = Geometry { h, w };
        let n = geo.plane();
        let c = self.arch.hidden_channels;
        let nblocks = self.arch.num_res_blocks;
        let layers = self.arch.layers();
        let mut grad = vec![T::zero(); self.params.len()];

        let tail = layers.last().expect("tail");
        let h_last = trace.hidden.last().expect("h_K");
        {
            let (gw, gb) = split_layer(&mut grad, tail);
            conv::backward_params(h_last, c, upstream.data(), geo, gw, gb);
        }
        let mut g_h = vec![T::zero(); c * n];
        conv::backward_input(upstream.data(), self.arch.bands, geo, self.layer(tail).0, c, &mut g_h);

        for k in (0..nblocks).rev() {
            let h_in = &trace.hidden[2 * k];
            let a = &trace.hidden[2 * k + 1];
            let (l1, l2) = (&layers[1 + 2 * k], &layers[2 + 2 * k]);
            {
                let (gw, gb) = split_layer(&mut grad, l2);
                conv::backward_params(a, c, &g_h, geo, gw, gb);
            }
            let mut g_a = vec![T::zero(); c * n];
            conv::backward_input(&g_h, c, geo, self.layer(l2).0, c, &mut g_a);
            relu_mask(&mut g_a, a);
            {
                let (gw, gb) = split_layer(&mut grad, l1);
                conv::backward_params(h_in, c, &g_a, geo, gw, gb);
            }
            let mut g_skip = vec![T::zero(); c * n];
            conv::backward_input(&g_a, c, geo, self.layer(l1).0, c, &mut g_skip);
            for (g, s) in g_h.iter_mut().zip(g_skip) {
                *g += s;
            }
        }

        relu_mask(&mut g_h, &trace.hidden[0]);
        let head = &layers[0];
        let (gw, gb) = split_layer(&mut grad, head);
        conv::backward_params(&trace.input, head.cin, &g_h, geo, gw, gb);
        Ok(grad)
    }

    /// Recomputes the forward pass and returns the parameter gradient.
    pub fn gradient(&self, z: &Cube<T>, x_init: &Cube<T>, upstream: &Cube<T>) -> Result<Vec<T>> {
        let (_, trace) = self.forward_traced(z, x_init)?;
        self.backward(&trace, upstream)
    }
}

fn split_layer<'a, T>(grad: &'a mut [T], l: &ConvLayout) -> (&'a mut [T], &'a mut [T]) {
    grad[l.weight_offset..l.end()].split_at_mut(l.weight_len())
}

fn relu<T: Real>(v: &mut [T]) {
    for x in v {
        *x = x.max(T::zero());
    }
}

/// Zeroes gradient entries where the post-activation value is not positive.
fn relu_mask<T: Real>(g: &mut [T], post: &[T]) {
    for (gv, &a) in g.iter_mut().zip(post) {
        if a <= T::zero() {
            *gv = T::zero();
        }
    }
}

/// `z ~ N(0, 1)` i.i.d., same shape as the cube it conditions.
pub fn noise_cube<T: Real>(height: usize, width: usize, bands: usize, seed: u64) -> Cube<T> {
    Cube::from_vec(height, width, bands, rng::standard_normal(height * width * bands, seed)).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomized<T: Real>(arch: RefinerArch, seed: u64, scale: f64) -> RefinerModel<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..arch.parameter_count())
            .map(|_| T::of(rng.gen_range(-scale..scale)))
            .collect();
        RefinerModel::from_params(arch, params).unwrap()
    }

    fn random_cube<T: Real>(h: usize, w: usize, b: usize, seed: u64) -> Cube<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Cube::from_fn(h, w, b, |_, _, _| T::of(rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn parameter_count_formula() {
        // Summed layer by layer: head 9*16*32 + 32 = 4640, two blocks of
        // 2 * (9*32*32 + 32) = 18496 each, tail 9*32*8 + 8 = 2312.
        let a = RefinerArch::new(8, 32, 2).unwrap();
        assert_eq!(4640 + 2 * 18496 + 2312, 43_944);
        assert_eq!(a.parameter_count(), 43_944);
        assert_eq!(a.layers().last().unwrap().end(), 43_944);
        assert!(RefinerArch::new(8, 0, 2).is_err());
    }

    #[test]
    fn fresh_model_outputs_zero() {
        let arch = RefinerArch::new(3, 6, 2).unwrap();
        let m = RefinerModel::<f32>::init(arch, 4).unwrap();
        let x = random_cube::<f32>(7, 5, 3, 1);
        let z = noise_cube::<f32>(7, 5, 3, 2);
        let r = m.forward(&z, &x).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
        assert_eq!(x.add(&r).unwrap(), x);
        assert_eq!(m, RefinerModel::init(arch, 4).unwrap());
        assert_ne!(m, RefinerModel::init(arch, 5).unwrap());
    }

    #[test]
    fn he_init_statistics() {
        let arch = RefinerArch::new(8, 32, 1).unwrap();
        let m = RefinerModel::<f64>::init(arch, 0).unwrap();
        let l = arch.layers()[1];
        let w = &m.params()[l.weight_offset..l.bias_offset];
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / (9.0 * 32.0);
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
        assert!(m.params()[l.bias_offset..l.end()].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn tail_bias_passes_through() {
        let arch = RefinerArch::new(2, 3, 1).unwrap();
        let mut params = vec![0.0f32; arch.parameter_count()];
        let tail = *arch.layers().last().unwrap();
        params[tail.bias_offset] = 0.25;
        params[tail.bias_offset + 1] = -0.5;
        let m = RefinerModel::from_params(arch, params).unwrap();
        let r = m.forward(&noise_cube(4, 4, 2, 1), &random_cube(4, 4, 2, 3)).unwrap();
        assert!(r.band(0).iter().all(|&v| v == 0.25));
        assert!(r.band(1).iter().all(|&v| v == -0.5));
    }

    #[test]
    fn hand_evaluated_single_pixel() {
        // 1x1 image, B=1, C=1, K=0: only the centre taps see data.
        let arch = RefinerArch::new(1, 1, 0).unwrap();
        let mut p = vec![0.0f64; arch.parameter_count()];
        assert_eq!(p.len(), 9 * 2 + 1 + 9 + 1);
        p[4] = 2.0; // head, x_init channel, centre tap
        p[9 + 4] = -1.0; // head, noise channel, centre tap
        p[18] = 0.5; // head bias
        p[19 + 4] = 3.0; // tail centre tap
        p[28] = 0.1; // tail bias
        let m = RefinerModel::from_params(arch, p).unwrap();
        let x = Cube::from_vec(1, 1, 1, vec![0.7]).unwrap();
        let z = Cube::from_vec(1, 1, 1, vec![0.2]).unwrap();
        let expected = 3.0 * f64::max(2.0 * 0.7 - 1.0 * 0.2 + 0.5, 0.0) + 0.1;
        assert!((m.forward(&z, &x).unwrap().data()[0] - expected).abs() < 1e-15);
        let z = Cube::from_vec(1, 1, 1, vec![5.0]).unwrap();
        assert!((m.forward(&z, &x).unwrap().data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let m = RefinerModel::<f32>::init(RefinerArch::new(2, 2, 0).unwrap(), 0).unwrap();
        assert!(m.forward(&noise_cube(3, 3, 2, 0), &random_cube(3, 3, 3, 0)).is_err());
        assert!(m.forward(&noise_cube(3, 4, 2, 0), &random_cube(3, 3, 2, 0)).is_err());
        let (_, tr) = m
            .forward_traced(&noise_cube(3, 3, 2, 0), &random_cube(3, 3, 2, 0))
            .unwrap();
        assert!(m.backward(&tr, &random_cube(3, 3, 1, 0)).is_err());
    }

    #[test]
    fn zero_upstream_and_tail_bias_gradient() {
        let arch = RefinerArch::new(2, 4, 1).unwrap();
        let m = RefinerModel::<f64>::init(arch, 7).unwrap();
        let x = random_cube::<f64>(5, 6, 2, 1);
        let z = noise_cube::<f64>(5, 6, 2, 2);
        let g = m.gradient(&z, &x, &Cube::zeros(5, 6, 2)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let up = random_cube::<f64>(5, 6, 2, 9);
        let g = m.gradient(&z, &x, &up).unwrap();
        let tail = *arch.layers().last().unwrap();
        for b in 0..2 {
            let s: f64 = up.band(b).iter().sum();
            assert!((g[tail.bias_offset + b] - s).abs() < 1e-12);
        }
        // Zero tail blocks every gradient upstream of it.
        assert!(g[..tail.weight_offset].iter().all(|&v| v == 0.0));
    }

    fn max_fd_error(arch: RefinerArch, h: usize, w: usize, seed: u64, coords_per_layer: usize) -> f64 {
        let m = randomized::<f64>(arch, seed, 0.4);
        let x = random_cube::<f64>(h, w, arch.bands, seed + 1);
        let z = noise_cube::<f64>(h, w, arch.bands, seed + 2);
        let up = random_cube::<f64>(h, w, arch.bands, seed + 3);
        let g = m.gradient(&z, &x, &up).unwrap();
        let objective = |p: &[f64]| {
            let mm = RefinerModel::from_params(arch, p.to_vec()).unwrap();
            mm.forward(&z, &x).unwrap().dot(&up)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let step = 1e-3;
        let mut worst = 0.0f64;
        for l in arch.layers() {
            for _ in 0..coords_per_layer {
                let k = rng.gen_range(l.weight_offset..l.end());
                let mut p = m.params().to_vec();
                p[k] += step;
                let fp = objective(&p);
                p[k] -= 2.0 * step;
                let fm = objective(&p);
                let fd = (fp - fm) / (2.0 * step);
                let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn finite_difference_gradient_f64() {
        // Central differences with h = 1e-3 on a piecewise-linear network:
        // exact unless a ReLU switches inside the stencil.
        let arch = RefinerArch::new(2, 4, 1).unwrap();
        let err = max_fd_error(arch, 6, 6, 11, 50);
        assert!(err <= 1e-6, "max relative error {err}");
    }

    #[test]
    fn finite_difference_gradient_f32() {
        let arch = RefinerArch::new(2, 4, 1).unwrap();
        let m = randomized::<f64>(arch, 5, 0.4);
        let m32 = m.cast::<f32>();
        let x = random_cube::<f32>(6, 6, 2, 6);
        let z = noise_cube::<f32>(6, 6, 2, 7);
        let up = random_cube::<f32>(6, 6, 2, 8);
        let g = m32.gradient(&z, &x, &up).unwrap();
        let (x64, z64, up64) = (x.cast::<f64>(), z.cast::<f64>(), up.cast::<f64>());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0.0f64;
        for l in arch.layers() {
            for _ in 0..50 {
                let k = rng.gen_range(l.weight_offset..l.end());
                let step = 1e-3;
                let mut p = m32.cast::<f64>().params().to_vec();
                p[k] += step;
                let fp = RefinerModel::from_params(arch, p.clone())
                    .unwrap()
                    .forward(&z64, &x64)
                    .unwrap()
                    .dot(&up64);
                p[k] -= 2.0 * step;
                let fm = RefinerModel::from_params(arch, p)
                    .unwrap()
                    .forward(&z64, &x64)
                    .unwrap()
                    .dot(&up64);
                let fd = (fp - fm) / (2.0 * step);
                let gk = g[k] as f64;
                worst = worst.max((fd - gk).abs() / fd.abs().max(gk.abs()).max(1e-3));
            }
        }
        assert!(worst <= 1e-3, "{worst}");
    }

    #[test]
    fn deterministic_and_shape_preserving() {
        for (k, &(h, w)) in [(1usize, 1usize), (3, 8), (9, 4)].iter().enumerate() {
            let arch = RefinerArch::new(3, 4, k).unwrap();
            let m = randomized::<f32>(arch, k as u64, 0.3);
            let x = random_cube::<f32>(h, w, 3, 1);
            let z = noise_cube::<f32>(h, w, 3, 2);
            let r0 = m.forward(&z, &x).unwrap();
            assert_eq!(r0.shape(), (h, w, 3));
            for _ in 0..100 {
                assert_eq!(m.forward(&z, &x).unwrap().data(), r0.data());
            }
        }
    }
}
