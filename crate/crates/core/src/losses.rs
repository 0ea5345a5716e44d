//! Training losses. Each returns its value and the gradient w.r.t. its direct input.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;
use crate::math::normalize3_backward;
use crate::metrics::ssim_with_grad;
use crate::raster_surfel::PeelStack;
use crate::scene::{Camera, Surfel};
use nalgebra::Vector3;

pub const SSIM_WEIGHT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Surfel-only image term.
    pub lambda_s: f64,
    /// Surfel size penalty.
    pub lambda_scale: f64,
    /// Transmittance term.
    pub lambda_t: f64,
    pub lambda_depth: f64,
    pub lambda_normal: f64,
    pub lambda_depth_normal: f64,
    pub geometry: bool,
    pub ssim_weight: f64,
    /// Normalize each scale axis by its own mean instead of the joint mean.
    pub per_axis_scale: bool,
}

impl LossWeights {
    pub fn bounded() -> Self {
        LossWeights {
            lambda_s: 0.01,
            lambda_scale: 1e-5,
            lambda_t: 0.08,
            lambda_depth: 0.1,
            lambda_normal: 0.05,
            lambda_depth_normal: 0.05,
            geometry: false,
            ssim_weight: SSIM_WEIGHT,
            per_axis_scale: false,
        }
    }

    pub fn unbounded() -> Self {
        LossWeights {
            lambda_scale: 5e-5,
            ..Self::bounded()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_s,
            self.lambda_scale,
            self.lambda_t,
            self.lambda_depth,
            self.lambda_normal,
            self.lambda_depth_normal,
            self.ssim_weight,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.ssim_weight > 1.0 {
            return Err(crate::Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::bounded()
    }
}

/// Mean absolute error and its gradient w.r.t. `pred`.
pub fn loss_l1(pred: &Image, target: &Image) -> Result<(f64, Vec<f64>)> {
    pred.same_shape(target)?;
    let n = pred.data.len().max(1) as f64;
    let mut total = 0.0;
    let grad = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| {
            let d = p - t;
            total += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((total / n, grad))
}

/// `(1 − β) L1 + β (1 − SSIM)`.
pub fn loss_rgb(pred: &Image, target: &Image, ssim_weight: f64) -> Result<(f64, Vec<f64>)> {
    let (l1, mut g) = loss_l1(pred, target)?;
    let (s, gs) = ssim_with_grad(pred, target, ssim_weight != 0.0)?;
    if let Some(gs) = gs {
        for (a, b) in g.iter_mut().zip(gs) {
            *a = (1.0 - ssim_weight) * *a - ssim_weight * b;
        }
    } else {
        g.iter_mut().for_each(|a| *a *= 1.0 - ssim_weight);
    }
    Ok(((1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - s), g))
}

pub fn loss_surfel(surfel_image: &Image, target: &Image) -> Result<(f64, Vec<f64>)> {
    loss_l1(surfel_image, target)
}

/// `(1/N) Σ exp(mean normalized scale)`, and `d/d(sx, sy)` per surfel.
pub fn loss_scale(surfels: &[Surfel], per_axis: bool) -> (f64, Vec<[f64; 2]>) {
    let n = surfels.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let nf = n as f64;
    if per_axis {
        let mx = surfels.iter().map(|s| s.scale.x).sum::<f64>() / nf;
        let my = surfels.iter().map(|s| s.scale.y).sum::<f64>() / nf;
        let e: Vec<f64> = surfels
            .iter()
            .map(|s| (0.5 * (s.scale.x / mx + s.scale.y / my)).exp())
            .collect();
        let value = e.iter().sum::<f64>() / nf;
        // d/dm_x of the sum
        let sx_term: f64 = surfels.iter().zip(&e).map(|(s, e)| e * s.scale.x).sum::<f64>();
        let sy_term: f64 = surfels.iter().zip(&e).map(|(s, e)| e * s.scale.y).sum::<f64>();
        let gmx = -0.5 * sx_term / (mx * mx) / nf;
        let gmy = -0.5 * sy_term / (my * my) / nf;
        let grad = e
            .iter()
            .map(|e| [0.5 * e / mx / nf + gmx / nf, 0.5 * e / my / nf + gmy / nf])
            .collect();
        return (value, grad);
    }
    let a: Vec<f64> = surfels.iter().map(|s| 0.5 * (s.scale.x + s.scale.y)).collect();
    let m = a.iter().sum::<f64>() / nf;
    let e: Vec<f64> = a.iter().map(|ai| (ai / m).exp()).collect();
    let value = e.iter().sum::<f64>() / nf;
    let gm = -a.iter().zip(&e).map(|(ai, ei)| ei * ai).sum::<f64>() / (m * m) / nf;
    // da_i/ds = 1/2 and dm/ds = 1/(2N)
    let grad = e
        .iter()
        .map(|ei| {
            let g = 0.5 * ei / m / nf + 0.5 * gm / nf;
            [g, g]
        })
        .collect();
    (value, grad)
}

/// `(1/HW) Σ (1 − T_L)^2`. The gradient w.r.t. `T_L` is zeroed at pixels with fewer
/// than two layers; the value is not masked.
pub fn loss_transmittance(stack: &PeelStack) -> (f64, Vec<f64>) {
    let n = stack.pixels.len().max(1) as f64;
    let l = stack.layers;
    let mut value = 0.0;
    let grad = stack
        .pixels
        .iter()
        .map(|px| {
            let r = 1.0 - px.transmittance[l];
            value += r * r;
            if px.count < 2 {
                0.0
            } else {
                -2.0 * r / n
            }
        })
        .collect();
    (value / n, grad)
}

/// The same loss restricted to the pixels where the gradient is live. Its derivative
/// equals the masked gradient, so it is the right target for finite differences.
pub fn loss_transmittance_masked_value(stack: &PeelStack) -> f64 {
    let n = stack.pixels.len().max(1) as f64;
    let l = stack.layers;
    stack
        .pixels
        .iter()
        .filter(|px| px.count >= 2)
        .map(|px| (1.0 - px.transmittance[l]).powi(2))
        .sum::<f64>()
        / n
}

/// Reference depth and normal maps; `mask` marks pixels with supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryTarget {
    pub depth: Vec<f64>,
    pub normal: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
}

/// Unit normals from a depth map via central-difference back-projection. Border pixels
/// and pixels next to missing depth are invalid.
pub fn depth_to_normal(depth: &[f64], camera: &Camera) -> (Vec<[f64; 3]>, Vec<bool>) {
    let (w, h) = (camera.width, camera.height);
    let mut normals = vec![[0.0; 3]; w * h];
    let mut valid = vec![false; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if let Some((u, _, _)) = dn_cross(depth, camera, x, y) {
                let n = u / u.norm();
                normals[y * w + x] = [n.x, n.y, n.z];
                valid[y * w + x] = true;
            }
        }
    }
    (normals, valid)
}

type Tangents = (Vector3<f64>, Vector3<f64>, Vector3<f64>);

/// `(dy × dx, dx, dy)` at an interior pixel, oriented towards the camera for a visible
/// surface.
fn dn_cross(depth: &[f64], camera: &Camera, x: usize, y: usize) -> Option<Tangents> {
    let w = camera.width;
    let d = |xx: usize, yy: usize| depth[yy * w + xx];
    let ids = [(x, y), (x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)];
    if ids.iter().any(|&(a, b)| !(d(a, b) > 0.0 && d(a, b).is_finite())) {
        return None;
    }
    let p = |xx: usize, yy: usize| camera.pixel_ray(xx, yy) * d(xx, yy);
    let dx = p(x + 1, y) - p(x - 1, y);
    let dy = p(x, y + 1) - p(x, y - 1);
    let u = dy.cross(&dx);
    (u.norm() > 1e-300).then_some((u, dx, dy))
}

/// Geometry term and gradients w.r.t. blended depth and blended normal.
pub struct GeometryLoss {
    pub value: f64,
    pub depth: f64,
    pub normal: f64,
    pub depth_normal: f64,
    pub grad_depth: Vec<f64>,
    pub grad_normal: Vec<[f64; 3]>,
}

pub fn loss_geometry(
    depth: &[f64],
    normal: &[[f64; 3]],
    target: &GeometryTarget,
    camera: &Camera,
    weights: &LossWeights,
) -> GeometryLoss {
    let np = depth.len();
    let (w, h) = (camera.width, camera.height);
    let count = target.mask.iter().filter(|m| **m).count().max(1) as f64;
    let mut grad_depth = vec![0.0; np];
    let mut grad_normal = vec![[0.0; 3]; np];
    let (mut l_sd, mut l_sn) = (0.0, 0.0);
    for i in 0..np {
        if !target.mask[i] {
            continue;
        }
        let d = depth[i] - target.depth[i];
        l_sd += d.abs();
        grad_depth[i] += weights.lambda_depth * d.signum() * (d != 0.0) as u8 as f64 / count;
        let dot: f64 = (0..3).map(|c| target.normal[i][c] * normal[i][c]).sum();
        l_sn += 1.0 - dot;
        for c in 0..3 {
            grad_normal[i][c] -= weights.lambda_normal * target.normal[i][c] / count;
        }
    }
    l_sd /= count;
    l_sn /= count;

    let mut live = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if target.mask[y * w + x] {
                if let Some(t) = dn_cross(depth, camera, x, y) {
                    live.push((x, y, t));
                }
            }
        }
    }
    let m = live.len().max(1) as f64;
    let mut l_sdn = 0.0;
    for (x, y, (u, dx, dy)) in live {
        let i = y * w + x;
        let nt = Vector3::from(target.normal[i]);
        let n = u / u.norm();
        l_sdn += 1.0 - nt.dot(&n);
        let g_n = -nt * (weights.lambda_depth_normal / m);
        let g_u = normalize3_backward(&u, &g_n);
        let g_dy = dx.cross(&g_u);
        let g_dx = g_u.cross(&dy);
        grad_depth[i + 1] += g_dx.dot(&camera.pixel_ray(x + 1, y));
        grad_depth[i - 1] -= g_dx.dot(&camera.pixel_ray(x - 1, y));
        grad_depth[i + w] += g_dy.dot(&camera.pixel_ray(x, y + 1));
        grad_depth[i - w] -= g_dy.dot(&camera.pixel_ray(x, y - 1));
    }
    l_sdn /= m;
    GeometryLoss {
        value: weights.lambda_depth * l_sd + weights.lambda_normal * l_sn + weights.lambda_depth_normal * l_sdn,
        depth: l_sd,
        normal: l_sn,
        depth_normal: l_sdn,
        grad_depth,
        grad_normal,
    }
}
