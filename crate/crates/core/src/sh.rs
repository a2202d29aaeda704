//! Real spherical-harmonics basis up to degree 3, in the sign convention used
//! by 3DGS checkpoints.

use crate::dual::Scalar;

pub const MAX_DEGREE: usize = 3;

pub const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// DC coefficient that reproduces `rgb` when all higher bands are zero.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / C0
}

/// Basis values for the unit direction `d`, written into `out[..coeff_count(degree)]`.
pub fn basis<S: Scalar>(degree: usize, d: [S; 3], out: &mut [S]) {
    let [x, y, z] = d;
    let c = S::cst;
    out[0] = c(C0);
    if degree == 0 {
        return;
    }
    out[1] = c(-C1) * y;
    out[2] = c(C1) * z;
    out[3] = c(-C1) * x;
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = c(C2[0]) * xy;
    out[5] = c(C2[1]) * yz;
    out[6] = c(C2[2]) * (c(2.0) * zz - xx - yy);
    out[7] = c(C2[3]) * xz;
    out[8] = c(C2[4]) * (xx - yy);
    if degree == 2 {
        return;
    }
    out[9] = c(C3[0]) * y * (c(3.0) * xx - yy);
    out[10] = c(C3[1]) * xy * z;
    out[11] = c(C3[2]) * y * (c(4.0) * zz - xx - yy);
    out[12] = c(C3[3]) * z * (c(2.0) * zz - c(3.0) * xx - c(3.0) * yy);
    out[13] = c(C3[4]) * x * (c(4.0) * zz - xx - yy);
    out[14] = c(C3[5]) * z * (xx - yy);
    out[15] = c(C3[6]) * x * (xx - c(3.0) * yy);
}

/// RGB of one Gaussian from its coefficients (`[k * 3 + channel]`) and basis values.
pub fn eval_color(coeffs: &[f64], basis: &[f64]) -> [f64; 3] {
    let mut rgb = [0.5; 3];
    for (k, b) in basis.iter().enumerate() {
        for (ch, v) in rgb.iter_mut().enumerate() {
            *v += coeffs[k * 3 + ch] * b;
        }
    }
    rgb
}
