//! Reconstruction quality metrics.
//!
//! Intensities are assumed normalized to `[0, 1]`, so the PSNR peak and the
//! SSIM data range are both fixed at 1.

use serde::{Deserialize, Serialize};

use crate::datamodel::Cube;
use crate::error::{Error, Result};
use crate::real::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scene: String,
    pub method: String,
    /// `inf` when the inputs are identical.
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute<T: Real>(scene: &str, method: &str, x: &Cube<T>, reference: &Cube<T>) -> Result<Self> {
        Ok(MetricReport {
            scene: scene.to_string(),
            method: method.to_string(),
            psnr_db: psnr(x, reference)?,
            ssim: ssim(x, reference)?,
        })
    }

    pub fn identical(&self) -> bool {
        self.psnr_db == f64::INFINITY
    }
}

pub fn mse<T: Real>(x: &Cube<T>, reference: &Cube<T>) -> Result<f64> {
    x.check_shape(reference, "mse")?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / x.data().len() as f64)
}

/// `10 log10(1 / MSE)` over all entries; `f64::INFINITY` flags identical inputs.
pub fn psnr<T: Real>(x: &Cube<T>, reference: &Cube<T>) -> Result<f64> {
    let m = mse(x, reference)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> f64 {
    let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = y.iter().map(|a| a * a).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, h, w, k);
    let my = filter_valid(y, h, w, k);
    let exx = filter_valid(&xx, h, w, k);
    let eyy = filter_valid(&yy, h, w, k);
    let exy = filter_valid(&xy, h, w, k);
    let n = mx.len();
    let mut total = 0.0;
    for p in 0..n {
        let (ux, uy) = (mx[p], my[p]);
        let vx = exx[p] - ux * ux;
        let vy = eyy[p] - uy * uy;
        let cxy = exy[p] - ux * uy;
        let num = (2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2);
        let den = (ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2);
        total += num / den;
    }
    total / n as f64
}

/// Mean SSIM over valid 11x11 Gaussian windows, averaged over bands.
pub fn ssim<T: Real>(x: &Cube<T>, reference: &Cube<T>) -> Result<f64> {
    x.check_shape(reference, "ssim")?;
    let (h, w, bands) = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("spatial size {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let k = gaussian_window();
    let per_band = crate::exec::map_range(bands, |b| {
        let xb: Vec<f64> = x.band(b).iter().map(|v| v.to_f64_lossy()).collect();
        let yb: Vec<f64> = reference.band(b).iter().map(|v| v.to_f64_lossy()).collect();
        ssim_plane(&xb, &yb, h, w, &k)
    });
    Ok(per_band.iter().sum::<f64>() / bands as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Roi {
    pub fn full<T: Real>(x: &Cube<T>) -> Self {
        Roi {
            row: 0,
            col: 0,
            height: x.height(),
            width: x.width(),
        }
    }

    /// Centred square covering about a quarter of the shorter side.
    pub fn centre<T: Real>(x: &Cube<T>) -> Self {
        let side = (x.height().min(x.width()) / 4).max(1);
        Roi {
            row: (x.height() - side) / 2,
            col: (x.width() - side) / 2,
            height: side,
            width: side,
        }
    }
}

/// Mean intensity per band inside `roi`.
pub fn spectral_curve<T: Real>(x: &Cube<T>, roi: Roi) -> Result<Vec<f64>> {
    if roi.height == 0 || roi.width == 0 || roi.row + roi.height > x.height() || roi.col + roi.width > x.width() {
        return Err(Error::invalid("roi", format!("{roi:?} outside {:?}", x.shape())));
    }
    let count = (roi.height * roi.width) as f64;
    Ok((0..x.bands())
        .map(|b| {
            let mut s = 0.0;
            for i in roi.row..roi.row + roi.height {
                for j in roi.col..roi.col + roi.width {
                    s += x.get(i, j, b).to_f64_lossy();
                }
            }
            s / count
        })
        .collect())
}

/// `band,value` rows.
pub fn curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("band,value\n");
    for (b, v) in curve.iter().enumerate() {
        s.push_str(&format!("{b},{v}\n"));
    }
    s
}

/// Pearson correlation coefficient.
pub fn correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(
            "correlation",
            format!("need equal lengths >= 2, got {} and {}", a.len(), b.len()),
        ));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::invalid("correlation", "constant curve"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_scene, SceneSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, b: usize, seed: u64) -> Cube<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Cube::from_fn(h, w, b, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn psnr_cases() {
        let r = Cube::<f32>::zeros(4, 4, 2);
        assert_eq!(psnr(&r, &r).unwrap(), f64::INFINITY);
        let x = Cube::<f64>::filled(4, 4, 2, 0.1);
        assert!((psnr(&x, &Cube::zeros(4, 4, 2)).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&x, &Cube::zeros(4, 4, 3)).is_err());
    }

    #[test]
    fn psnr_matches_double_loop() {
        let (x, y) = (random(4, 4, 2, 1), random(4, 4, 2, 2));
        let mut acc = 0.0;
        for b in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    acc += (x.get(i, j, b) - y.get(i, j, b)).powi(2);
                }
            }
        }
        let expected = 10.0 * (1.0 / (acc / 32.0)).log10();
        assert!((psnr(&x, &y).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let x = random(16, 16, 2, 3);
        let noise = random(16, 16, 2, 4).map(|v| v - 0.5);
        let p: Vec<f64> = [0.01, 0.05, 0.2]
            .iter()
            .map(|&a| psnr(&x.add(&noise.scale(a)).unwrap(), &x).unwrap())
            .collect();
        assert!(p[0] > p[1] && p[1] > p[2]);
    }

    #[test]
    fn ssim_identity_symmetry_and_constant_closed_form() {
        let x = random(16, 14, 3, 5);
        let y = random(16, 14, 3, 6);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        assert!(ssim(&x, &y).unwrap() < 1.0);

        // Constant images: variances vanish, so only the luminance term remains.
        let r = Cube::<f64>::filled(12, 12, 2, 0.5);
        let c = Cube::<f64>::filled(12, 12, 2, 0.7);
        let closed = (2.0 * 0.7 * 0.5 + SSIM_C1) / (0.7 * 0.7 + 0.5 * 0.5 + SSIM_C1);
        assert!((closed - 0.945_953_249_560_870_2).abs() < 1e-12);
        assert!((ssim(&c, &r).unwrap() - closed).abs() < 1e-9);

        assert!(ssim(&random(10, 12, 1, 0), &random(10, 12, 1, 1)).is_err());
    }

    #[test]
    fn curves() {
        let c = Cube::<f32>::filled(5, 6, 3, 0.5);
        assert_eq!(spectral_curve(&c, Roi::full(&c)).unwrap(), vec![0.5; 3]);
        let x = random(5, 6, 4, 9);
        let px = spectral_curve(
            &x,
            Roi {
                row: 2,
                col: 3,
                height: 1,
                width: 1,
            },
        )
        .unwrap();
        assert_eq!(px, (0..4).map(|b| x.get(2, 3, b)).collect::<Vec<_>>());
        assert!(spectral_curve(
            &x,
            Roi {
                row: 4,
                col: 0,
                height: 2,
                width: 1
            }
        )
        .is_err());

        let scene = generate_scene(&SceneSpec::new(8, 8, 4, 3, 7)).unwrap();
        let full = spectral_curve(&scene, Roi::full(&scene)).unwrap();
        for (a, b) in full.iter().zip(scene.band_means()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(curve_csv(&[0.5, 0.25]), "band,value\n0,0.5\n1,0.25\n");
    }

    #[test]
    fn pearson() {
        let a = [0.1, 0.4, 0.35, 0.9];
        assert!((correlation(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((correlation(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        // (1, 2, 3) vs (1, 2, 4): sxy = 3, sxx = 2, syy = 14/3 -> 3 / sqrt(28/3).
        let r = correlation(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.981_980_506_061_965_7).abs() < 1e-12, "{r}");
        assert!(correlation(&[1.0], &[1.0]).is_err());
        assert!(correlation(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ssim_bounded(seed in any::<u64>(), scale in -3.0f64..3.0) {
            let x = random(12, 13, 2, seed);
            let y = random(12, 13, 2, seed ^ 7).scale(scale);
            let s = ssim(&x, &y).unwrap();
            prop_assert!(s > -1.0 && s <= 1.0);
        }

        #[test]
        fn curve_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let x = random(6, 7, 3, seed);
            let y = random(6, 7, 3, seed ^ 3);
            let roi = Roi { row: 1, col: 2, height: 4, width: 3 };
            let lhs = spectral_curve(&x.scale(a).add(&y.scale(b)).unwrap(), roi).unwrap();
            let cx = spectral_curve(&x, roi).unwrap();
            let cy = spectral_curve(&y, roi).unwrap();
            for k in 0..3 {
                prop_assert!((lhs[k] - (a * cx[k] + b * cy[k])).abs() < 1e-12);
            }
        }
    }
}
