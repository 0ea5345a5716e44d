//! Small dense-math helpers shared by the forward and backward passes:
//! quaternion rotations, real spherical harmonics, and their derivatives.

use nalgebra::{Matrix3, Vector3, Vector4};

/// Quaternions are stored as `(w, x, y, z)`.
pub type Quat = Vector4<f64>;

pub const IDENTITY_QUAT: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

/// Rotation matrix of a *unit* quaternion.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back onto the unit quaternion.
pub fn quat_to_matrix_backward(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)]
            + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    Quat::new(gw, gx, gy, gz)
}

/// Gradient of `q / |q|` pulled back onto the raw 4-vector.
pub fn normalize_backward(raw: &Quat, g_unit: &Quat) -> Quat {
    let n = raw.norm();
    let u = raw / n;
    (g_unit - u * u.dot(g_unit)) / n
}

/// Same as [`normalize_backward`] for 3-vectors.
pub fn normalize3_backward(raw: &Vector3<f64>, g_unit: &Vector3<f64>) -> Vector3<f64> {
    let n = raw.norm();
    let u = raw / n;
    (g_unit - u * u.dot(g_unit)) / n
}

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Constant added to every evaluated colour so that all-zero coefficients mean mid grey.
pub const SH_OFFSET: f64 = 0.5;

pub const MAX_SH_DEGREE: usize = 3;

pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Real SH basis values at a unit direction, for all 16 functions up to degree 3.
pub fn sh_basis(d: &Vector3<f64>) -> [f64; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives of each basis polynomial w.r.t. `(x, y, z)`, treating the
/// components as independent.
pub fn sh_basis_grad(d: &Vector3<f64>) -> [[f64; 3]; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        [0.0, 0.0, 0.0],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [SH_C2[0] * y, SH_C2[0] * x, 0.0],
        [0.0, SH_C2[1] * z, SH_C2[1] * y],
        [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z],
        [SH_C2[3] * z, 0.0, SH_C2[3] * x],
        [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0],
        [
            SH_C3[0] * 6.0 * x * y,
            SH_C3[0] * (3.0 * xx - 3.0 * yy),
            0.0,
        ],
        [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y],
        [
            SH_C3[2] * (-2.0 * x * y),
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            SH_C3[2] * 8.0 * y * z,
        ],
        [
            SH_C3[3] * (-6.0 * x * z),
            SH_C3[3] * (-6.0 * y * z),
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ],
        [
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            SH_C3[4] * (-2.0 * x * y),
            SH_C3[4] * 8.0 * x * z,
        ],
        [
            SH_C3[5] * 2.0 * x * z,
            SH_C3[5] * (-2.0 * y * z),
            SH_C3[5] * (xx - yy),
        ],
        [
            SH_C3[6] * (3.0 * xx - 3.0 * yy),
            SH_C3[6] * (-6.0 * x * y),
            0.0,
        ],
    ]
}

/// Evaluates an RGB colour from SH coefficients (`coeffs[k][channel]`) at a unit direction.
pub fn sh_eval(coeffs: &[[f64; 3]], dir: &Vector3<f64>) -> [f64; 3] {
    let basis = sh_basis(dir);
    let mut out = [SH_OFFSET; 3];
    for (k, c) in coeffs.iter().enumerate() {
        for ch in 0..3 {
            out[ch] += basis[k] * c[ch];
        }
    }
    out
}

/// Backward of [`sh_eval`]. Accumulates coefficient gradients into `g_coeffs` and returns
/// the gradient w.r.t. the (unit) direction.
pub fn sh_eval_backward(
    coeffs: &[[f64; 3]],
    dir: &Vector3<f64>,
    g_color: &[f64; 3],
    g_coeffs: &mut [[f64; 3]],
) -> Vector3<f64> {
    let basis = sh_basis(dir);
    let mut g_dir = Vector3::zeros();
    let needs_dir = coeffs.len() > 1;
    let dbasis = if needs_dir { Some(sh_basis_grad(dir)) } else { None };
    for (k, c) in coeffs.iter().enumerate() {
        let mut g_basis = 0.0;
        for ch in 0..3 {
            g_coeffs[k][ch] += basis[k] * g_color[ch];
            g_basis += c[ch] * g_color[ch];
        }
        if let Some(db) = &dbasis {
            g_dir += Vector3::new(db[k][0], db[k][1], db[k][2]) * g_basis;
        }
    }
    g_dir
}

/// Degree-0 coefficient that reproduces a constant colour value.
pub fn rgb_to_sh0(value: f64) -> f64 {
    (value - SH_OFFSET) / SH_C0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F) -> f64 {
        let h = 1e-6;
        (f(h) - f(-h)) / (2.0 * h)
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let q = Quat::new(0.3, -0.5, 0.7, 0.1).normalize();
        let m = quat_to_matrix(&q);
        assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-12);
        assert!((m.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quat_matrix_backward_matches_fd() {
        let q = Quat::new(0.3, -0.5, 0.7, 0.1);
        let g = Matrix3::new(0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, -0.8, 0.9);
        let loss = |q: &Quat| quat_to_matrix(q).component_mul(&g).sum();
        let analytic = quat_to_matrix_backward(&q, &g);
        for i in 0..4 {
            let num = fd(|h| {
                let mut qq = q;
                qq[i] += h;
                loss(&qq)
            });
            assert!((num - analytic[i]).abs() < 1e-8, "{i}: {num} vs {}", analytic[i]);
        }
    }

    #[test]
    fn sh_basis_grad_matches_fd() {
        let d = Vector3::new(0.3, -0.4, 0.5);
        let g = sh_basis_grad(&d);
        for k in 0..16 {
            for a in 0..3 {
                let num = fd(|h| {
                    let mut dd = d;
                    dd[a] += h;
                    sh_basis(&dd)[k]
                });
                assert!((num - g[k][a]).abs() < 1e-8, "basis {k} axis {a}");
            }
        }
    }

    #[test]
    fn sh_dc_reproduces_colour() {
        let coeffs = [[rgb_to_sh0(0.2), rgb_to_sh0(0.4), rgb_to_sh0(0.9)]];
        let c = sh_eval(&coeffs, &Vector3::new(0.0, 0.0, 1.0));
        for (a, b) in c.iter().zip([0.2, 0.4, 0.9]) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
