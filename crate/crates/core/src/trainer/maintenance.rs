//! Scheduled scene edits: surfel pruning, large-Gaussian splitting, error-driven
//! Gaussian densification.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::composite::Render;
use crate::image::Image;
use crate::margin::{nearest, MARGIN_NEIGHBORS};
use crate::math::{rgb_to_sh0, Quat};
use crate::params::gaussian_len;
use crate::raster_surfel::surfel_coverage;
use crate::scene::{Camera, Gaussian, Scene};

use super::adam::{Adam, Moments};

pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
pub const SPLIT_FACTOR: f64 = 2.0;
pub const DENSIFY_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneThresholds {
    /// Minimum first-layer pixel count summed over a sweep.
    pub min_coverage: u64,
    /// Minimum ratio of first-layer pixels to all fragments.
    pub min_visible_ratio: f64,
}

impl Default for PruneThresholds {
    fn default() -> Self {
        PruneThresholds {
            min_coverage: 20,
            min_visible_ratio: 0.05,
        }
    }
}

/// Which surfels survive pruning, given coverage summed over a sweep of views. At least
/// one surfel always survives: the best covered one.
pub fn prune_mask(coverage: &[(u64, u64)], t: &PruneThresholds) -> Vec<bool> {
    let mut keep: Vec<bool> = coverage
        .iter()
        .map(|&(first, frags)| first >= t.min_coverage && first as f64 >= t.min_visible_ratio * frags as f64)
        .collect();
    if !keep.iter().any(|k| *k) && !keep.is_empty() {
        let best = (0..coverage.len()).max_by_key(|&i| (coverage[i].0, std::cmp::Reverse(i))).unwrap();
        keep[best] = true;
    }
    keep
}

pub fn sweep_coverage(scene: &Scene, cameras: &[&Camera], layers: usize) -> Vec<(u64, u64)> {
    let mut total = vec![(0u64, 0u64); scene.surfels.len()];
    for cam in cameras {
        for (t, c) in total.iter_mut().zip(surfel_coverage(scene, cam, layers)) {
            t.0 += c.0;
            t.1 += c.1;
        }
    }
    total
}

/// Removes poorly visible surfels. Returns how many were removed.
pub fn prune_surfels(
    scene: &mut Scene,
    adam: Option<&mut Adam>,
    cameras: &[&Camera],
    layers: usize,
    t: &PruneThresholds,
) -> usize {
    let keep = prune_mask(&sweep_coverage(scene, cameras, layers), t);
    let before = scene.surfels.len();
    let mut it = keep.iter();
    scene.surfels.retain(|_| *it.next().unwrap());
    if let Some(a) = adam {
        a.retain_surfels(&keep);
    }
    before - scene.surfels.len()
}

/// Average operative margin of the surfels nearest to `p`.
pub fn neighborhood_margin(scene: &Scene, centers: &[Vector3<f64>], p: &Vector3<f64>) -> Option<f64> {
    let idx = nearest(centers, p, MARGIN_NEIGHBORS, None);
    if idx.is_empty() {
        return None;
    }
    Some(idx.iter().map(|&j| scene.surfels[j].eps).sum::<f64>() / idx.len() as f64)
}

/// Indices of Gaussians whose mean scale exceeds twice the local surfel margin.
pub fn oversized_gaussians(scene: &Scene) -> Vec<usize> {
    let centers: Vec<Vector3<f64>> = scene.surfels.iter().map(|s| s.position).collect();
    scene
        .gaussians
        .iter()
        .enumerate()
        .filter(|(_, g)| {
            neighborhood_margin(scene, &centers, &g.position).is_some_and(|e| g.mean_scale() > SPLIT_FACTOR * e)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Replaces each oversized Gaussian by two samples from its own density with shrunken
/// scales; opacity, rotation and colour are inherited. The first child takes the parent's
/// slot, the second is appended. Returns the number split.
pub fn split_large_gaussians(scene: &mut Scene, adam: Option<&mut Adam>, rng: &mut ChaCha8Rng) -> usize {
    let flagged = oversized_gaussians(scene);
    let len = gaussian_len(scene.sh_count());
    let mut appended = Vec::new();
    let mut fresh = Vec::new();
    for &i in &flagged {
        let parent = scene.gaussians[i].clone();
        let m = parent.rotation_matrix();
        let mut child = || {
            let z = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            let mut c = parent.clone();
            c.position = parent.position + m * parent.scale.component_mul(&z);
            c.scale = parent.scale / SPLIT_SCALE_DIVISOR;
            c
        };
        let a = child();
        let b = child();
        scene.gaussians[i] = a;
        appended.push(b);
        fresh.push(i);
    }
    scene.gaussians.extend(appended);
    if let Some(adam) = adam {
        for i in fresh {
            adam.gaussians[i] = Moments::new(len);
        }
        adam.gaussians.resize_with(scene.gaussians.len(), || Moments::new(len));
    }
    flagged.len()
}

/// Spawns up to `budget` Gaussians at the worst pixels of `render` against `target`,
/// just in front of the surface that culls Gaussians there. Returns the number added.
pub fn densify_gaussians(
    scene: &mut Scene,
    adam: Option<&mut Adam>,
    camera: &Camera,
    render: &Render,
    target: &Image,
    budget: usize,
) -> usize {
    if budget == 0 {
        return 0;
    }
    let n = camera.pixel_count();
    let mut err: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let (c, t) = (render.image.rgb(i), target.rgb(i));
            ((0..3).map(|ch| (c[ch] - t[ch]).abs()).sum::<f64>(), i)
        })
        .filter(|(e, _)| *e > 0.0)
        .collect();
    err.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let k = scene.sh_count();
    let mut added = 0;
    for &(_, i) in &err {
        if added == budget {
            break;
        }
        let px = &render.stack.pixels[i];
        let depth = if px.cull.depth.is_finite() {
            px.cull.depth
        } else if px.count > 0 {
            px.layers[px.count - 1].depth
        } else {
            continue;
        };
        let scale = 0.5 * depth / camera.fx;
        let z = depth - scale;
        if !(z > camera.near) {
            continue;
        }
        let (x, y) = (i % camera.width, i / camera.width);
        let pos = camera.camera_to_world(&(camera.pixel_ray(x, y) * z));
        let color = target.rgb(i);
        let mut sh = vec![[0.0; 3]; k];
        sh[0] = color.map(rgb_to_sh0);
        let g = Gaussian::new(pos, DENSIFY_SIGMA, Quat::new(1.0, 0.0, 0.0, 0.0), Vector3::repeat(scale), sh)
            .expect("densified Gaussian is valid");
        scene.gaussians.push(g);
        added += 1;
    }
    if let Some(adam) = adam {
        let len = gaussian_len(k);
        adam.gaussians.resize_with(scene.gaussians.len(), || Moments::new(len));
    }
    added
}

/// World-space covariance of a Gaussian.
pub fn gaussian_covariance(g: &Gaussian) -> Matrix3<f64> {
    let m = g.rotation_matrix();
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    m * s2 * m.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composite::render;
    use crate::scene::Surfel;
    use nalgebra::Vector2;
    use rand::SeedableRng;

    fn surfel(p: [f64; 3], s: f64) -> Surfel {
        Surfel::new(Vector3::from(p), Quat::new(1.0, 0.0, 0.0, 0.0), Vector2::new(s, s), vec![[0.5; 3]]).unwrap()
    }

    fn gaussian(p: [f64; 3], s: f64) -> Gaussian {
        Gaussian::new(Vector3::from(p), 0.5, Quat::new(1.0, 0.0, 0.0, 0.0), Vector3::repeat(s), vec![[0.1; 3]]).unwrap()
    }

    #[test]
    fn prune_keeps_at_least_one() {
        let t = PruneThresholds::default();
        assert_eq!(prune_mask(&[(0, 0), (3, 10)], &t), vec![false, true]);
        assert_eq!(prune_mask(&[(100, 200), (30, 1000)], &t), vec![true, false]);
    }

    #[test]
    fn split_flags_only_oversized() {
        let mut scene = Scene::empty(0);
        for i in 0..16 {
            scene.surfels.push(surfel([0.1 * i as f64, 0.0, 0.0], 0.02)); // eps 0.1
        }
        scene.gaussians.push(gaussian([0.5, 0.0, 0.0], 0.21));
        scene.gaussians.push(gaussian([0.5, 0.1, 0.0], 0.19));
        assert_eq!(oversized_gaussians(&scene), vec![0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(split_large_gaussians(&mut scene, None, &mut rng), 1);
        assert_eq!(scene.gaussians.len(), 3);
        assert!(scene.gaussians.iter().all(|g| g.mean_scale() <= 0.21));
        assert!((scene.gaussians[2].scale.x - 0.21 / 1.6).abs() < 1e-15);
    }

    #[test]
    fn densify_spawns_in_front_of_the_culling_surface() {
        let cam = Camera::look_at(Vector3::new(0.0, 0.0, -4.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 16, 16, 0.6);
        let mut scene = Scene::empty(0);
        scene.surfels.push(surfel([0.0; 3], 1.0));
        let r = render(&scene, &cam, 3);
        let mut target = r.image.clone();
        assert_eq!(densify_gaussians(&mut scene, None, &cam, &r, &target, 10), 0);
        target.pixel_mut(5, 9).copy_from_slice(&[1.0, 1.0, 1.0]);
        assert_eq!(densify_gaussians(&mut scene, None, &cam, &r, &target, 10), 1);
        let g = &scene.gaussians[0];
        let pc = cam.world_to_camera(&g.position);
        assert!(pc.z < 4.0 && pc.z > 3.9);
        let u = cam.fx * pc.x / pc.z + cam.cx;
        let v = cam.fy * pc.y / pc.z + cam.cy;
        assert!((u - 5.5).abs() < 1e-9 && (v - 9.5).abs() < 1e-9);
        // the new Gaussian is visible at its pixel
        let r2 = render(&scene, &cam, 3);
        assert!(r2.accum.weight[9 * 16 + 5] > 0.0);
    }
}
