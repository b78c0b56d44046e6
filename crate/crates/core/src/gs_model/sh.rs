//! Real spherical harmonics in the sign convention used by reference 3DGS
//! files, so third-party scenes keep their colors.

use nalgebra::Vector3;

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

/// Constant added to the SH sum so zero coefficients render mid-gray.
pub const SH_OFFSET: f64 = 0.5;

/// Coefficients per channel for degree `degree`, i.e. `(L+1)^2`.
#[inline]
pub const fn coeffs_per_channel(degree: u8) -> usize {
    let l = degree as usize + 1;
    l * l
}

/// Higher-order coefficients per channel, `(L+1)^2 - 1`.
#[inline]
pub const fn rest_per_channel(degree: u8) -> usize {
    coeffs_per_channel(degree) - 1
}

/// Inverse of [`rest_per_channel`] for the supported degrees.
pub fn degree_from_rest(per_channel: usize) -> Option<u8> {
    (0..=3u8).find(|&l| rest_per_channel(l) == per_channel)
}

/// Basis values for a unit `dir`; entries beyond `degree` are zero.
pub fn basis(dir: &Vector3<f64>, degree: u8) -> [f64; 16] {
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if degree == 0 {
        return b;
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    b[1] = -SH_C1 * y;
    b[2] = SH_C1 * z;
    b[3] = -SH_C1 * x;
    if degree == 1 {
        return b;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    b[4] = SH_C2[0] * xy;
    b[5] = SH_C2[1] * yz;
    b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    b[7] = SH_C2[3] * xz;
    b[8] = SH_C2[4] * (xx - yy);
    if degree == 2 {
        return b;
    }
    b[9] = SH_C3[0] * y * (3.0 * xx - yy);
    b[10] = SH_C3[1] * xy * z;
    b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    b[14] = SH_C3[5] * z * (xx - yy);
    b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    b
}

/// RGB color of one Gaussian. `rest` is channel-major: `rest[c * k + j]`.
pub fn eval_color(basis: &[f64; 16], degree: u8, dc: &[f64; 3], rest: &[f64]) -> [f64; 3] {
    let k = rest_per_channel(degree);
    let mut rgb = [0.0; 3];
    for c in 0..3 {
        let mut v = basis[0] * dc[c] + SH_OFFSET;
        for j in 0..k {
            v += basis[j + 1] * rest[c * k + j];
        }
        rgb[c] = v;
    }
    rgb
}

/// Inverse of the DC term: the `sh_dc` value that renders `rgb` with zero rest.
pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|v| (v - SH_OFFSET) / SH_C0)
}
