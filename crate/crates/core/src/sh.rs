//! Real spherical-harmonics color evaluation for base Gaussians.
//!
//! Uses the basis layout and sign convention common to Gaussian splatting
//! renderers: the coefficient for band `l`, order `m` lives at index
//! `l * l + l + m`, and the evaluated color is `sum(Y_i(d) * c_i) + 0.5`,
//! clamped below at zero.
//!
//! Constant table (real SH normalization):
//!
//! | band | constants |
//! |------|-----------|
//! | 0 | `Y00 = 0.28209479177387814` |
//! | 1 | `0.4886025119029199` for `-y`, `z`, `-x` |
//! | 2 | `1.0925484305920792` (xy, -yz, -xz), `0.31539156525252005` (2z^2-x^2-y^2), `0.5462742152960396` (x^2-y^2) |
//! | 3 | `0.5900435899266435`, `2.890611442640554`, `0.4570457994644658`, `0.3731763325901154`, `1.445305721320277` |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

pub const MAX_SH_DEGREE: usize = 3;
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Offset added to the SH sum before clamping.
pub const SH_OFFSET: f64 = 0.5;

pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Per-channel SH coefficients; `coeffs.len()` is `(degree + 1)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShCoeffs {
    pub coeffs: Vec<[f64; 3]>,
}

impl ShCoeffs {
    pub fn zeros(degree: usize) -> Self {
        Self {
            coeffs: vec![[0.0; 3]; coeff_count(degree)],
        }
    }

    /// Coefficients reproducing a constant color `rgb` (before clamping).
    pub fn constant(degree: usize, rgb: [f64; 3]) -> Self {
        let mut sh = Self::zeros(degree);
        for c in 0..3 {
            sh.coeffs[0][c] = (rgb[c] - SH_OFFSET) / SH_C0;
        }
        sh
    }

    pub fn degree(&self) -> Result<usize> {
        (0..=MAX_SH_DEGREE)
            .find(|&d| coeff_count(d) == self.coeffs.len())
            .ok_or_else(|| {
                Error::InvalidScene(format!(
                    "{} SH coefficients is not (d+1)^2 for d <= {MAX_SH_DEGREE}",
                    self.coeffs.len()
                ))
            })
    }
}

/// Evaluates the first `n` basis functions at `d` (assumed unit).
pub fn sh_basis(d: &Vec3, n: usize) -> [f64; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if n > 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if n > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
        if n > 9 {
            b[9] = SH_C3[0] * y * (3.0 * xx - yy);
            b[10] = SH_C3[1] * x * y * z;
            b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = SH_C3[5] * z * (xx - yy);
            b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    b
}

/// Partial derivatives of each basis function w.r.t. the (unnormalized)
/// components of `d`, treating the polynomial forms above as functions of
/// free `(x, y, z)`.
pub fn sh_basis_grad(d: &Vec3, n: usize) -> [[f64; 3]; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut g = [[0.0; 3]; 16];
    if n > 1 {
        g[1] = [0.0, -SH_C1, 0.0];
        g[2] = [0.0, 0.0, SH_C1];
        g[3] = [-SH_C1, 0.0, 0.0];
    }
    if n > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        g[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
        g[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
        g[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
        g[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
        g[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
        if n > 9 {
            g[9] = [
                SH_C3[0] * 6.0 * x * y,
                SH_C3[0] * (3.0 * xx - 3.0 * yy),
                0.0,
            ];
            g[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
            g[11] = [
                SH_C3[2] * (-2.0 * x * y),
                SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
                SH_C3[2] * 8.0 * y * z,
            ];
            g[12] = [
                SH_C3[3] * (-6.0 * x * z),
                SH_C3[3] * (-6.0 * y * z),
                SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            g[13] = [
                SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
                SH_C3[4] * (-2.0 * x * y),
                SH_C3[4] * 8.0 * x * z,
            ];
            g[14] = [
                SH_C3[5] * 2.0 * x * z,
                SH_C3[5] * (-2.0 * y * z),
                SH_C3[5] * (xx - yy),
            ];
            g[15] = [
                SH_C3[6] * (3.0 * xx - 3.0 * yy),
                SH_C3[6] * (-6.0 * x * y),
                0.0,
            ];
        }
    }
    g
}

/// Unclamped SH sum plus offset; also reports which channels are clamped.
pub(crate) fn eval_sh_raw(coeffs: &ShCoeffs, dir: &Vec3) -> [f64; 3] {
    let n = coeffs.coeffs.len();
    let basis = sh_basis(dir, n);
    let mut rgb = [SH_OFFSET; 3];
    for (b, c) in basis.iter().zip(&coeffs.coeffs) {
        for ch in 0..3 {
            rgb[ch] += b * c[ch];
        }
    }
    rgb
}

/// View-dependent color of a base Gaussian seen along `dir`.
pub fn eval_sh(coeffs: &ShCoeffs, dir: &Vec3) -> Result<[f64; 3]> {
    let norm = dir.norm();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDirection(norm));
    }
    coeffs.degree()?;
    let raw = eval_sh_raw(coeffs, dir);
    Ok(raw.map(|v| v.max(0.0)))
}
