//! Sort-free Gaussian splatting modulated by peeled surfel transmittance.
//!
//! Every Gaussian uses the camera-space depth of its centre for all pixels it covers.
//! At a pixel, that depth selects a transmittance interval between peeled layers and is
//! tested against the culling depth plus the owning surfel's margin. Surviving weights
//! are summed without any ordering.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::math::sh_eval;
use crate::raster_surfel::{clip_bbox, map_tile_rows, PeelPixel, PeelStack, TILE_SIZE};
use crate::scene::{Camera, Gaussian, Scene};

/// Footprint cutoff in standard deviations.
pub const FOOTPRINT_SIGMAS: f64 = 3.5;
/// Largest Mahalanobis half-power still evaluated: `3.5^2 / 2`.
pub const MAX_POWER: f64 = FOOTPRINT_SIGMAS * FOOTPRINT_SIGMAS / 2.0;
/// Screen-space low-pass added to the projected covariance (pixels^2).
pub const COV_REGULARIZATION: f64 = 0.3;
pub const MIN_COV_DET: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct GaussianSplat {
    pub index: u32,
    /// Camera-space z of the centre, shared by every covered pixel.
    pub depth: f64,
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub color: [f64; 3],
    pub sigma: f64,
    pub bbox: [usize; 4],
    pub(crate) center_cam: Vector3<f64>,
    pub(crate) jacobian: Matrix2x3<f64>,
    pub(crate) cov_cam: Matrix3<f64>,
    pub(crate) view_dir: Vector3<f64>,
}

/// EWA-style projection; `None` when the Gaussian is culled for this view.
pub fn project_gaussian(g: &Gaussian, camera: &Camera) -> Option<GaussianSplat> {
    let pc = camera.world_to_camera(&g.position);
    let z = pc.z;
    if !(z > camera.near && z < camera.far) {
        return None;
    }
    let m = g.rotation_matrix();
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    let cov_world = m * s2 * m.transpose();
    let cov_cam = camera.rotation * cov_world * camera.rotation.transpose();
    let jacobian = Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * pc.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * pc.y / (z * z),
    );
    let cov = jacobian * cov_cam * jacobian.transpose()
        + Matrix2::identity() * COV_REGULARIZATION;
    let det = cov.determinant();
    if !(det >= MIN_COV_DET) {
        return None;
    }
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let mean = Vector2::new(
        camera.fx * pc.x / z + camera.cx,
        camera.fy * pc.y / z + camera.cy,
    );
    let ex = FOOTPRINT_SIGMAS * cov[(0, 0)].sqrt();
    let ey = FOOTPRINT_SIGMAS * cov[(1, 1)].sqrt();
    let bbox = clip_bbox(mean.x - ex, mean.y - ey, mean.x + ex, mean.y + ey, camera)?;
    let to_cam = camera.center() - g.position;
    let view_dir = to_cam / to_cam.norm();
    Some(GaussianSplat {
        index: 0,
        depth: z,
        mean,
        cov,
        conic,
        color: sh_eval(&g.sh, &view_dir),
        sigma: g.sigma,
        bbox,
        center_cam: pc,
        jacobian,
        cov_cam,
        view_dir,
    })
}

pub fn project_gaussians(scene: &Scene, camera: &Camera) -> Vec<GaussianSplat> {
    scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            project_gaussian(g, camera).map(|mut s| {
                s.index = i as u32;
                s
            })
        })
        .collect()
}

/// Transmittance in front of a Gaussian at `depth`, plus the interval index it came from.
///
/// The interval is the number of peeled layers at or in front of `depth`, capped at
/// `layers - 1`; a depth exactly equal to a layer depth falls into the deeper interval.
pub fn interval_transmittance(px: &PeelPixel, depth: f64, layers: usize) -> (f64, usize) {
    let mut k = 0;
    while k < px.count && k + 1 < layers && px.layers[k].depth <= depth {
        k += 1;
    }
    (px.transmittance[k], k)
}

/// Per-pixel sums of Gaussian colour and weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumBuffers {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    pub weight: Vec<f64>,
}

/// One Gaussian's evaluation at one pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SplatSample {
    /// Gaussian falloff `sigma * exp(-power)`.
    pub alpha: f64,
    pub power: f64,
    pub delta: Vector2<f64>,
    pub transmittance: f64,
    pub interval: usize,
}

/// Evaluates a splat at pixel centre `(x + 0.5, y + 0.5)`; `None` when it contributes nothing.
#[inline]
pub(crate) fn sample_splat(
    s: &GaussianSplat,
    px: &PeelPixel,
    layers: usize,
    x: usize,
    y: usize,
    surfel_eps: &[f64],
) -> Option<SplatSample> {
    let delta = Vector2::new(x as f64 + 0.5 - s.mean.x, y as f64 + 0.5 - s.mean.y);
    let power = 0.5 * delta.dot(&(s.conic * delta));
    if !(power <= MAX_POWER) {
        return None;
    }
    let margin = px
        .cull
        .layer
        .map(|l| surfel_eps[px.layers[l].surfel_id as usize])
        .unwrap_or(0.0);
    if !(s.depth < px.cull.depth + margin) {
        return None;
    }
    let (t, k) = interval_transmittance(px, s.depth, layers);
    if t == 0.0 {
        return None;
    }
    Some(SplatSample {
        alpha: s.sigma * (-power).exp(),
        power,
        delta,
        transmittance: t,
        interval: k,
    })
}

pub(crate) fn bin_splats(splats: &[GaussianSplat], camera: &Camera) -> Vec<Vec<u32>> {
    let tx = camera.width.div_ceil(TILE_SIZE);
    let ty = camera.height.div_ceil(TILE_SIZE);
    let mut bins = vec![Vec::new(); tx * ty];
    for (i, s) in splats.iter().enumerate() {
        let [x0, y0, x1, y1] = s.bbox;
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        for ty_i in y0 / TILE_SIZE..=(y1 - 1) / TILE_SIZE {
            for tx_i in x0 / TILE_SIZE..=(x1 - 1) / TILE_SIZE {
                bins[ty_i * tx + tx_i].push(i as u32);
            }
        }
    }
    bins
}

/// Accumulates projected splats against a peel stack. Within a pixel, splats are summed in
/// list order, so the result is bitwise deterministic for a given list.
pub fn accumulate_splats(
    splats: &[GaussianSplat],
    camera: &Camera,
    stack: &PeelStack,
    surfel_eps: &[f64],
) -> AccumBuffers {
    let bins = bin_splats(splats, camera);
    let tiles_x = camera.width.div_ceil(TILE_SIZE);
    let per_pixel: Vec<([f64; 3], f64)> = map_tile_rows(camera, |y0, y1| {
        let mut out = Vec::with_capacity((y1 - y0) * camera.width);
        for y in y0..y1 {
            for x in 0..camera.width {
                let px = stack.pixel(x, y);
                let mut c = [0.0; 3];
                let mut w = 0.0;
                for &i in &bins[(y / TILE_SIZE) * tiles_x + x / TILE_SIZE] {
                    let s = &splats[i as usize];
                    let [bx0, by0, bx1, by1] = s.bbox;
                    if x < bx0 || x >= bx1 || y < by0 || y >= by1 {
                        continue;
                    }
                    if let Some(e) = sample_splat(s, px, stack.layers, x, y, surfel_eps) {
                        let wt = e.alpha * e.transmittance;
                        for ch in 0..3 {
                            c[ch] += wt * s.color[ch];
                        }
                        w += wt;
                    }
                }
                out.push((c, w));
            }
        }
        out
    });
    let (color, weight) = per_pixel.into_iter().unzip();
    AccumBuffers {
        width: camera.width,
        height: camera.height,
        color,
        weight,
    }
}

/// Projects and splats every Gaussian in the scene against `stack`.
pub fn splat_accumulate(scene: &Scene, camera: &Camera, stack: &PeelStack) -> AccumBuffers {
    let splats = project_gaussians(scene, camera);
    let eps: Vec<f64> = scene.surfels.iter().map(|s| s.eps).collect();
    accumulate_splats(&splats, camera, stack, &eps)
}
