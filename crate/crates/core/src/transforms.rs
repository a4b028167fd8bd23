//! Finite group of unitary spatial transforms for the equivariance loss.
//!
//! An element is stored in the canonical form
//!
//! ```text
//! T = R^k . Fv^fv . Fh^fh . S(sr, sc)
//! ```
//!
//! i.e. a cyclic shift is applied first, then the flips, then `k`
//! counter-clockwise quarter turns. Every transform permutes pixels, acts
//! identically on every band and is therefore orthogonal: `T^-1 = T^T`.
//!
//! Inverses and products are computed symbolically from the relations
//! `Fh R = R^-1 Fh`, `Fv R = R^-1 Fv`, `R S(r, c) = S(-c, r) R`,
//! `Fh S(r, c) = S(r, -c) Fh` and `Fv S(r, c) = S(-r, c) Fv`, none of which
//! depend on the image size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Cube;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupElement {
    pub rotation_quarter_turns: u8,
    pub flip_h: bool,
    pub flip_v: bool,
    pub shift_rows: i64,
    pub shift_cols: i64,
}

/// `(r, c) -> (-c, r)`, the action of one quarter turn on a shift vector.
fn rho(k: u8, (r, c): (i64, i64)) -> (i64, i64) {
    match k % 4 {
        0 => (r, c),
        1 => (-c, r),
        2 => (-r, -c),
        _ => (c, -r),
    }
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement {
        rotation_quarter_turns: 0,
        flip_h: false,
        flip_v: false,
        shift_rows: 0,
        shift_cols: 0,
    };

    pub fn rotation(k: u8) -> Self {
        GroupElement {
            rotation_quarter_turns: k % 4,
            ..Self::IDENTITY
        }
    }

    pub fn flip_horizontal() -> Self {
        GroupElement {
            flip_h: true,
            ..Self::IDENTITY
        }
    }

    pub fn flip_vertical() -> Self {
        GroupElement {
            flip_v: true,
            ..Self::IDENTITY
        }
    }

    pub fn shift(rows: i64, cols: i64) -> Self {
        GroupElement {
            shift_rows: rows,
            shift_cols: cols,
            ..Self::IDENTITY
        }
    }

    fn odd_flips(&self) -> bool {
        self.flip_h ^ self.flip_v
    }

    fn flip_vector(&self, (mut r, mut c): (i64, i64)) -> (i64, i64) {
        if self.flip_h {
            c = -c;
        }
        if self.flip_v {
            r = -r;
        }
        (r, c)
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_quarter_turns.is_multiple_of(4)
            && !self.flip_h
            && !self.flip_v
            && self.shift_rows == 0
            && self.shift_cols == 0
    }

    pub fn inverse(&self) -> Self {
        let k = self.rotation_quarter_turns % 4;
        let k_inv = if self.odd_flips() { k } else { (4 - k) % 4 };
        let back = rho((4 - k_inv) % 4, (-self.shift_rows, -self.shift_cols));
        let (shift_rows, shift_cols) = self.flip_vector(back);
        GroupElement {
            rotation_quarter_turns: k_inv,
            flip_h: self.flip_h,
            flip_v: self.flip_v,
            shift_rows,
            shift_cols,
        }
    }

    /// `self . other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let kb = other.rotation_quarter_turns % 4;
        let ka = self.rotation_quarter_turns % 4;
        let k = if self.odd_flips() { ka + 4 - kb } else { ka + kb } % 4;
        let moved = rho((4 - kb) % 4, (self.shift_rows, self.shift_cols));
        let (r, c) = other.flip_vector(moved);
        GroupElement {
            rotation_quarter_turns: k,
            flip_h: self.flip_h ^ other.flip_h,
            flip_v: self.flip_v ^ other.flip_v,
            shift_rows: r + other.shift_rows,
            shift_cols: c + other.shift_cols,
        }
    }

    /// Reduces the shift modulo the image size.
    pub fn normalized(&self, height: usize, width: usize) -> Self {
        GroupElement {
            rotation_quarter_turns: self.rotation_quarter_turns % 4,
            shift_rows: self.shift_rows.rem_euclid(height as i64),
            shift_cols: self.shift_cols.rem_euclid(width as i64),
            ..*self
        }
    }

    pub fn check_applicable(&self, height: usize, width: usize) -> Result<()> {
        if self.rotation_quarter_turns % 2 == 1 && height != width {
            return Err(Error::invalid(
                "rotation_quarter_turns",
                format!("odd quarter turn on non-square {height}x{width} image"),
            ));
        }
        Ok(())
    }

    pub fn apply<T: Real>(&self, x: &Cube<T>) -> Result<Cube<T>> {
        let (h, w, bands) = x.shape();
        self.check_applicable(h, w)?;
        let src = self.source_indices(h, w);
        let mut out = Cube::zeros(h, w, bands);
        for b in 0..bands {
            let inp = x.band(b);
            for (o, &s) in out.band_mut(b).iter_mut().zip(&src) {
                *o = inp[s];
            }
        }
        Ok(out)
    }

    /// For each output pixel, the flat index of the input pixel it copies.
    fn source_indices(&self, h: usize, w: usize) -> Vec<usize> {
        let (hi, wi) = (h as i64, w as i64);
        let sr = self.shift_rows.rem_euclid(hi);
        let sc = self.shift_cols.rem_euclid(wi);
        let mut src = Vec::with_capacity(h * w);
        for i in 0..hi {
            for j in 0..wi {
                // Undo rotation (rotation output -> flip output).
                let (mut a, mut b) = match self.rotation_quarter_turns % 4 {
                    0 => (i, j),
                    1 => (j, wi - 1 - i),
                    2 => (hi - 1 - i, wi - 1 - j),
                    _ => (hi - 1 - j, i),
                };
                // Undo flips (flip output -> shift output).
                if self.flip_v {
                    a = hi - 1 - a;
                }
                if self.flip_h {
                    b = wi - 1 - b;
                }
                // Undo the cyclic shift.
                let r = (a - sr).rem_euclid(hi);
                let c = (b - sc).rem_euclid(wi);
                src.push((r * wi + c) as usize);
            }
        }
        src
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub allow_rotations: bool,
    pub allow_flips: bool,
    /// Extra cyclic shifts `(rows, cols)`; the zero shift is always present.
    pub shift_strides: Vec<(i64, i64)>,
    pub include_identity_in_sampling: bool,
}

impl Default for GroupSpec {
    /// Dihedral group plus cyclic shifts by the default dispersion step in
    /// each axis, identity excluded from sampling.
    fn default() -> Self {
        GroupSpec::dihedral_with_shifts(2)
    }
}

impl GroupSpec {
    pub fn dihedral_with_shifts(stride: i64) -> Self {
        GroupSpec {
            allow_rotations: true,
            allow_flips: true,
            shift_strides: vec![(stride, 0), (0, stride)],
            include_identity_in_sampling: false,
        }
    }

    /// Enumerates the distinct sampling candidates for an `h x w` image.
    pub fn elements(&self, height: usize, width: usize) -> Vec<GroupElement> {
        let quarter_turns: &[u8] = match (self.allow_rotations, height == width) {
            (false, _) => &[0],
            (true, true) => &[0, 1, 2, 3],
            (true, false) => &[0, 2],
        };
        let flips: &[bool] = if self.allow_flips { &[false, true] } else { &[false] };
        let mut shifts = vec![(0i64, 0i64)];
        shifts.extend(self.shift_strides.iter().copied());

        let mut out: Vec<GroupElement> = Vec::new();
        for &(sr, sc) in &shifts {
            for &k in quarter_turns {
                for &fh in flips {
                    let g = GroupElement {
                        rotation_quarter_turns: k,
                        flip_h: fh,
                        flip_v: false,
                        shift_rows: sr,
                        shift_cols: sc,
                    }
                    .normalized(height, width);
                    if (!g.is_identity() || self.include_identity_in_sampling) && !out.contains(&g) {
                        out.push(g);
                    }
                }
            }
        }
        out
    }

    /// Uniform draw from [`GroupSpec::elements`], deterministic in `(seed, step)`.
    pub fn sample(&self, height: usize, width: usize, seed: u64, step: u64) -> Result<GroupElement> {
        let elems = self.elements(height, width);
        if elems.is_empty() {
            return Err(Error::invalid("group", "empty element set"));
        }
        let mut rng = rng::stream(seed, &[0x6_0A7, step]);
        Ok(elems[rng.gen_range(0..elems.len())])
    }
}
