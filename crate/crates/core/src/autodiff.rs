//! Hand-derived reverse pass over the fixed render pipeline.
//!
//! The forward [`Render`] is the tape. Backward replays each pixel's discrete choices
//! (peel order, transmittance interval, culling, footprint cutoff) as constants and
//! differentiates only the continuous values selected by them. The opaque core of a
//! surfel has `alpha == 1` exactly and passes no gradient to the surfel's geometry.
//!
//! Per-pixel work is split by rows of tiles. Each chunk accumulates into its own
//! buffers, which are merged in chunk order, so gradients are bitwise deterministic
//! regardless of the thread count.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::composite::Render;
use crate::error::{Error, Result};
use crate::math::{
    normalize3_backward, normalize_backward, quat_to_matrix_backward, sh_eval_backward, Quat,
};
use crate::raster_surfel::{MAX_LAYERS, TILE_SIZE};
use crate::scene::{Camera, Scene};
use crate::splat_gauss::{bin_splats, sample_splat};

/// Upstream gradients on the per-pixel render outputs. Everything but `color` is optional.
#[derive(Debug, Clone, Default)]
pub struct PixelGrads {
    /// dL/dC for the composited image.
    pub color: Vec<[f64; 3]>,
    /// dL/dC_s, for losses on the surfel-only image.
    pub surfel_color: Option<Vec<[f64; 3]>>,
    /// dL/dT_L, the transmittance behind the last peeled layer.
    pub last_transmittance: Option<Vec<f64>>,
    /// dL/dD_s for the blended surfel depth.
    pub surfel_depth: Option<Vec<f64>>,
    /// dL/dN_s for the blended surfel normal.
    pub surfel_normal: Option<Vec<[f64; 3]>>,
}

impl PixelGrads {
    pub fn zeros(pixels: usize) -> Self {
        PixelGrads {
            color: vec![[0.0; 3]; pixels],
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions {
    /// Propagate Gaussian-weight gradients into surfel geometry through `t_s`.
    pub transmittance_grad: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions {
            transmittance_grad: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfelGrad {
    pub position: Vector3<f64>,
    /// Gradient w.r.t. the raw (pre-normalization) quaternion.
    pub rotation: Quat,
    pub scale: Vector2<f64>,
    pub sh: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    pub sigma: f64,
    pub rotation: Quat,
    pub scale: Vector3<f64>,
    pub sh: Vec<[f64; 3]>,
}

/// Parameter gradients laid out like [`Scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrad {
    pub surfels: Vec<SurfelGrad>,
    pub gaussians: Vec<GaussianGrad>,
}

impl SceneGrad {
    pub fn zeros(scene: &Scene) -> Self {
        let k = scene.sh_count();
        SceneGrad {
            surfels: (0..scene.surfels.len())
                .map(|_| SurfelGrad {
                    position: Vector3::zeros(),
                    rotation: Quat::zeros(),
                    scale: Vector2::zeros(),
                    sh: vec![[0.0; 3]; k],
                })
                .collect(),
            gaussians: (0..scene.gaussians.len())
                .map(|_| GaussianGrad {
                    position: Vector3::zeros(),
                    sigma: 0.0,
                    rotation: Quat::zeros(),
                    scale: Vector3::zeros(),
                    sh: vec![[0.0; 3]; k],
                })
                .collect(),
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &SceneGrad, factor: f64) {
        for (a, b) in self.surfels.iter_mut().zip(&other.surfels) {
            a.position += b.position * factor;
            a.rotation += b.rotation * factor;
            a.scale += b.scale * factor;
            for (x, y) in a.sh.iter_mut().zip(&b.sh) {
                for ch in 0..3 {
                    x[ch] += y[ch] * factor;
                }
            }
        }
        for (a, b) in self.gaussians.iter_mut().zip(&other.gaussians) {
            a.position += b.position * factor;
            a.sigma += b.sigma * factor;
            a.rotation += b.rotation * factor;
            a.scale += b.scale * factor;
            for (x, y) in a.sh.iter_mut().zip(&b.sh) {
                for ch in 0..3 {
                    x[ch] += y[ch] * factor;
                }
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for s in &self.surfels {
            m = m.max(s.position.amax()).max(s.rotation.amax()).max(s.scale.amax());
            for c in &s.sh {
                m = c.iter().fold(m, |a, v| a.max(v.abs()));
            }
        }
        for g in &self.gaussians {
            m = m
                .max(g.position.amax())
                .max(g.sigma.abs())
                .max(g.rotation.amax())
                .max(g.scale.amax());
            for c in &g.sh {
                m = c.iter().fold(m, |a, v| a.max(v.abs()));
            }
        }
        m
    }
}

/// Camera-space gradients for one surfel view.
#[derive(Debug, Clone, Copy, Default)]
struct SurfelAcc {
    center: Vector3<f64>,
    axis_u: Vector3<f64>,
    axis_v: Vector3<f64>,
    normal: Vector3<f64>,
    scale: [f64; 2],
    color: [f64; 3],
}

/// Screen-space gradients for one splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatAcc {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    sigma: f64,
    color: [f64; 3],
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Config(format!(
            "{name} gradient has {got} pixels, render has {want}"
        )));
    }
    Ok(())
}

/// Backpropagates pixel gradients to every scene parameter.
pub fn backward(
    scene: &Scene,
    camera: &Camera,
    render: &Render,
    grads: &PixelGrads,
    opts: &BackwardOptions,
) -> Result<SceneGrad> {
    let npix = camera.pixel_count();
    check_len("image", render.image.pixel_count(), npix)?;
    check_len("color", grads.color.len(), npix)?;
    if let Some(g) = &grads.surfel_color {
        check_len("surfel color", g.len(), npix)?;
    }
    if let Some(g) = &grads.last_transmittance {
        check_len("transmittance", g.len(), npix)?;
    }
    if let Some(g) = &grads.surfel_depth {
        check_len("depth", g.len(), npix)?;
    }
    if let Some(g) = &grads.surfel_normal {
        check_len("normal", g.len(), npix)?;
    }
    if render.surfel_views.len() != scene.surfels.len() {
        return Err(Error::Config(format!(
            "tape has {} surfels, scene has {}",
            render.surfel_views.len(),
            scene.surfels.len()
        )));
    }
    if render.splats.iter().any(|s| s.index as usize >= scene.gaussians.len()) {
        return Err(Error::Config("tape references a missing Gaussian".into()));
    }

    let splat_bins = bin_splats(&render.splats, camera);
    let tiles_x = camera.width.div_ceil(TILE_SIZE);
    let rows = camera.height.div_ceil(TILE_SIZE);
    // transmittance gradients only reach this render's own surfels
    let trans_grad = opts.transmittance_grad && render.splat_stack.is_none();

    let partials: Vec<(Vec<SurfelAcc>, Vec<SplatAcc>)> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let mut sacc = vec![SurfelAcc::default(); render.surfel_views.len()];
            let mut gacc = vec![SplatAcc::default(); render.splats.len()];
            let y0 = r * TILE_SIZE;
            let y1 = (y0 + TILE_SIZE).min(camera.height);
            for y in y0..y1 {
                for x in 0..camera.width {
                    let bin = &splat_bins[(y / TILE_SIZE) * tiles_x + x / TILE_SIZE];
                    pixel_backward(
                        camera, render, grads, trans_grad, bin, x, y, &mut sacc, &mut gacc,
                    );
                }
            }
            (sacc, gacc)
        })
        .collect();

    let mut sacc = vec![SurfelAcc::default(); render.surfel_views.len()];
    let mut gacc = vec![SplatAcc::default(); render.splats.len()];
    for (ps, pg) in partials {
        for (a, b) in sacc.iter_mut().zip(ps) {
            a.center += b.center;
            a.axis_u += b.axis_u;
            a.axis_v += b.axis_v;
            a.normal += b.normal;
            for i in 0..2 {
                a.scale[i] += b.scale[i];
            }
            for ch in 0..3 {
                a.color[ch] += b.color[ch];
            }
        }
        for (a, b) in gacc.iter_mut().zip(pg) {
            a.mean += b.mean;
            a.conic += b.conic;
            a.sigma += b.sigma;
            for ch in 0..3 {
                a.color[ch] += b.color[ch];
            }
        }
    }

    let mut out = SceneGrad::zeros(scene);
    let cam_center = camera.center();
    let rc_t = camera.rotation.transpose();
    for (i, acc) in sacc.iter().enumerate() {
        let surfel = &scene.surfels[i];
        let view = &render.surfel_views[i];
        let g = &mut out.surfels[i];
        g.position = rc_t * acc.center;
        let g_rot_cam = Matrix3::from_columns(&[acc.axis_u, acc.axis_v, acc.normal]);
        let g_m = rc_t * g_rot_cam;
        let unit = surfel.rotation / surfel.rotation.norm();
        g.rotation = normalize_backward(&surfel.rotation, &quat_to_matrix_backward(&unit, &g_m));
        g.scale = Vector2::new(acc.scale[0], acc.scale[1]);
        let g_dir = sh_eval_backward(&surfel.sh, &view.view_dir, &acc.color, &mut g.sh);
        g.position -= normalize3_backward(&(cam_center - surfel.position), &g_dir);
    }

    for (acc, splat) in gacc.iter().zip(&render.splats) {
        let gi = splat.index as usize;
        let gauss = &scene.gaussians[gi];
        let g = &mut out.gaussians[gi];
        g.sigma += acc.sigma;

        let conic = splat.conic;
        let g_cov2 = -(conic.transpose() * acc.conic * conic.transpose());
        let j = splat.jacobian;
        let cov_cam = splat.cov_cam;
        let g_j = g_cov2 * j * cov_cam.transpose() + g_cov2.transpose() * j * cov_cam;
        let g_cov_cam = j.transpose() * g_cov2 * j;

        let pc = splat.center_cam;
        let (fx, fy, z) = (camera.fx, camera.fy, pc.z);
        let z2 = z * z;
        let z3 = z2 * z;
        let mut g_pc = Vector3::new(
            acc.mean.x * fx / z + g_j[(0, 2)] * (-fx / z2),
            acc.mean.y * fy / z + g_j[(1, 2)] * (-fy / z2),
            -acc.mean.x * fx * pc.x / z2 - acc.mean.y * fy * pc.y / z2
                + g_j[(0, 0)] * (-fx / z2)
                + g_j[(0, 2)] * (2.0 * fx * pc.x / z3)
                + g_j[(1, 1)] * (-fy / z2)
                + g_j[(1, 2)] * (2.0 * fy * pc.y / z3),
        );
        if !g_pc.iter().all(|v| v.is_finite()) {
            g_pc = Vector3::zeros();
        }

        let g_cov3 = rc_t * g_cov_cam * camera.rotation;
        let m = gauss.rotation_matrix();
        let s2 = Matrix3::from_diagonal(&gauss.scale.component_mul(&gauss.scale));
        let g_m = g_cov3 * m * s2 + g_cov3.transpose() * m * s2;
        let g_d = m.transpose() * g_cov3 * m;
        for k in 0..3 {
            g.scale[k] += 2.0 * gauss.scale[k] * g_d[(k, k)];
        }
        let unit = gauss.rotation / gauss.rotation.norm();
        g.rotation += normalize_backward(&gauss.rotation, &quat_to_matrix_backward(&unit, &g_m));
        g.position += rc_t * g_pc;
        let g_dir = sh_eval_backward(&gauss.sh, &splat.view_dir, &acc.color, &mut g.sh);
        g.position -= normalize3_backward(&(cam_center - gauss.position), &g_dir);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn pixel_backward(
    camera: &Camera,
    render: &Render,
    grads: &PixelGrads,
    trans_grad: bool,
    bin: &[u32],
    x: usize,
    y: usize,
    sacc: &mut [SurfelAcc],
    gacc: &mut [SplatAcc],
) {
    let i = y * camera.width + x;
    let g_c = grads.color[i];
    let den = render.surfel.weight[i] + render.accum.weight[i];
    let c = render.image.rgb(i);
    let mut g_cs = [g_c[0] / den, g_c[1] / den, g_c[2] / den];
    let g_cg = g_cs;
    let g_wg = -dot3(&g_c, &c) / den;
    if let Some(extra) = &grads.surfel_color {
        for ch in 0..3 {
            g_cs[ch] += extra[i][ch];
        }
    }

    // transmittance gradients, indexed by ladder position
    let mut g_t = [0.0; MAX_LAYERS + 1];

    let splat_px = &render.splat_stack().pixels[i];
    let layers = render.layers();
    for &si in bin {
        let s = &render.splats[si as usize];
        let [bx0, by0, bx1, by1] = s.bbox;
        if x < bx0 || x >= bx1 || y < by0 || y >= by1 {
            continue;
        }
        let Some(e) = sample_splat(s, splat_px, layers, x, y, &render.surfel_eps) else {
            continue;
        };
        let through = dot3(&g_cg, &s.color) + g_wg;
        let g_alpha = e.transmittance * through;
        let a = &mut gacc[si as usize];
        let wt = e.alpha * e.transmittance;
        for ch in 0..3 {
            a.color[ch] += wt * g_cg[ch];
        }
        if trans_grad {
            g_t[e.interval] += e.alpha * through;
        }
        a.sigma += g_alpha * (-e.power).exp();
        let g_power = -g_alpha * e.alpha;
        a.conic += (e.delta * e.delta.transpose()) * (0.5 * g_power);
        a.mean -= (s.conic * e.delta) * g_power;
    }

    let px = &render.stack.pixels[i];
    let n = px.count;
    if let Some(gl) = &grads.last_transmittance {
        g_t[layers] += gl[i];
    }
    // missing layers have alpha 0, so T_k == T_n for k > n
    for k in n + 1..=MAX_LAYERS {
        g_t[n] += g_t[k];
        g_t[k] = 0.0;
    }
    if n == 0 {
        return;
    }
    let g_d = grads.surfel_depth.as_ref().map_or(0.0, |g| g[i]);
    let g_n = grads.surfel_normal.as_ref().map_or([0.0; 3], |g| g[i]);
    let bg = &render.background;
    g_t[n] += dot3(&g_cs, bg);

    let layers_px = px.layers();
    let mut g_w = [0.0; MAX_LAYERS];
    for (j, l) in layers_px.iter().enumerate() {
        g_w[j] = dot3(&g_cs, &l.color) + g_d * l.depth + dot3(&g_n, &l.normal);
    }
    // w_j = A_j * T_{j-1}
    for j in 0..n {
        g_t[j] += g_w[j] * layers_px[j].alpha;
    }
    for (j, l) in layers_px.iter().enumerate() {
        let t_prev = px.transmittance[j];
        let w_j = l.alpha * t_prev;
        let mut g_a = g_w[j] * t_prev;
        // T_k = prod_{m <= k} (1 - A_m), for ladder positions k >= j + 1
        for k in j + 1..=n {
            if g_t[k] == 0.0 {
                continue;
            }
            let mut others = 1.0;
            for (m, lm) in layers_px.iter().enumerate().take(k) {
                if m != j {
                    others *= 1.0 - lm.alpha;
                }
            }
            g_a -= g_t[k] * others;
        }

        let sid = l.surfel_id as usize;
        let view = &render.surfel_views[sid];
        let acc = &mut sacc[sid];
        for ch in 0..3 {
            acc.color[ch] += g_cs[ch] * w_j;
        }
        let g_depth = g_d * w_j;
        let g_normal = Vector3::new(g_n[0], g_n[1], g_n[2]) * w_j;
        let (gx, gy) = if l.opaque {
            (0.0, 0.0)
        } else {
            let g_r2 = g_a * (-0.5 * l.alpha);
            (2.0 * l.local[0] * g_r2, 2.0 * l.local[1] * g_r2)
        };
        if gx == 0.0 && gy == 0.0 && g_depth == 0.0 && g_normal == Vector3::zeros() {
            continue;
        }
        let ray = camera.pixel_ray(x, y);
        let denom = view.normal.dot(&ray);
        let t = l.depth;
        let h = ray * t - view.center;
        let (sx, sy) = (view.scale[0], view.scale[1]);
        let g_h = view.axis_u * (gx / sx) + view.axis_v * (gy / sy);
        acc.axis_u += h * (gx / sx);
        acc.axis_v += h * (gy / sy);
        acc.scale[0] -= gx * l.local[0] / sx;
        acc.scale[1] -= gy * l.local[1] / sy;
        let g_tt = g_depth + g_h.dot(&ray);
        acc.center += -g_h + view.normal * (g_tt / denom);
        acc.normal += -h * (g_tt / denom);
        // the stored normal faces the camera
        if denom > 0.0 {
            acc.normal -= g_normal;
        } else {
            acc.normal += g_normal;
        }
    }
}
