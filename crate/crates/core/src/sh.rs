//! Real spherical harmonics up to degree 2.
//!
//! Colors are `0.5 + Σ_b coeff_b·Y_b(dir)` per channel, clamped below at 0.

use nalgebra::Vector3;

use crate::error::{invalid, Result};

pub const MAX_DEGREE: usize = 2;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

pub fn num_basis(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Degree for a basis count, if it is a supported one.
pub fn degree_for_basis(count: usize) -> Option<usize> {
    (0..=MAX_DEGREE).find(|&d| num_basis(d) == count)
}

/// DC coefficients producing `rgb` (before clamping).
pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

/// Basis values `Y_b(dir)` for the first `count` basis functions.
pub fn basis(dir: &Vector3<f64>, count: usize, out: &mut [f64; 9]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = SH_C0;
    if count > 1 {
        out[1] = -SH_C1 * y;
        out[2] = SH_C1 * z;
        out[3] = -SH_C1 * x;
    }
    if count > 4 {
        out[4] = SH_C2[0] * x * y;
        out[5] = SH_C2[1] * y * z;
        out[6] = SH_C2[2] * (2.0 * z * z - x * x - y * y);
        out[7] = SH_C2[3] * x * z;
        out[8] = SH_C2[4] * (x * x - y * y);
    }
}

/// Gradients of each basis function with respect to `dir`.
pub(crate) fn basis_gradient(dir: &Vector3<f64>, count: usize, out: &mut [Vector3<f64>; 9]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = Vector3::zeros();
    if count > 1 {
        out[1] = Vector3::new(0.0, -SH_C1, 0.0);
        out[2] = Vector3::new(0.0, 0.0, SH_C1);
        out[3] = Vector3::new(-SH_C1, 0.0, 0.0);
    }
    if count > 4 {
        out[4] = Vector3::new(SH_C2[0] * y, SH_C2[0] * x, 0.0);
        out[5] = Vector3::new(0.0, SH_C2[1] * z, SH_C2[1] * y);
        out[6] = Vector3::new(-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z);
        out[7] = Vector3::new(SH_C2[3] * z, 0.0, SH_C2[3] * x);
        out[8] = Vector3::new(2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0);
    }
}

/// Unclamped color and per-channel clamp flags.
pub(crate) fn eval_raw(coeffs: &[[f64; 3]], dir: &Vector3<f64>) -> ([f64; 3], [bool; 3]) {
    let mut y = [0.0; 9];
    basis(dir, coeffs.len(), &mut y);
    let mut rgb = [0.5; 3];
    for (b, c) in coeffs.iter().enumerate() {
        for ch in 0..3 {
            rgb[ch] += c[ch] * y[b];
        }
    }
    let clamped = rgb.map(|v| v < 0.0);
    (rgb.map(|v| v.max(0.0)), clamped)
}

/// Evaluates view-dependent RGB color for a unit direction.
pub fn eval_sh(coeffs: &[[f64; 3]], dir: &Vector3<f64>) -> Result<[f64; 3]> {
    if degree_for_basis(coeffs.len()).is_none() {
        return Err(invalid(format!("unsupported SH basis count {}", coeffs.len())));
    }
    if (dir.norm() - 1.0).abs() > 1e-6 {
        return Err(invalid("SH direction must be unit length"));
    }
    Ok(eval_raw(coeffs, dir).0)
}
