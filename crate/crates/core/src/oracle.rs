//! Slow reference implementations used to check the fast paths.
//!
//! Nothing here is used for rendering or training.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, BackwardOptions, PixelGrads, SceneGrad};
use crate::composite::{render, render_with_splat_stack, Render};
use crate::image::Image;
use crate::params::{all_handles, get_grad, get_param, param_class, set_param, ParamClass, ParamHandle};
use crate::raster_surfel::{rasterize_surfel_fragments, SurfelFragment, TILE_SIZE};
use nalgebra::{Vector2, Vector3};

use crate::math::Quat;
use crate::scene::{Camera, Gaussian, Scene, Surfel};
use crate::splat_gauss::{bin_splats, project_gaussians, sample_splat, MAX_POWER};

/// Every surfel fragment of every pixel, sorted by `(depth, id)`, plus the colour from
/// compositing all of them.
#[derive(Debug, Clone)]
pub struct ABuffer {
    pub width: usize,
    pub height: usize,
    pub fragments: Vec<Vec<SurfelFragment>>,
    pub color: Vec<[f64; 3]>,
}

pub fn abuffer_render_surfels(scene: &Scene, camera: &Camera) -> ABuffer {
    let mut fragments = Vec::with_capacity(camera.pixel_count());
    let mut color = Vec::with_capacity(camera.pixel_count());
    for y in 0..camera.height {
        for x in 0..camera.width {
            let mut frags = rasterize_surfel_fragments(scene, camera, (x, y));
            frags.sort_by(|a, b| a.key_cmp(b));
            let mut c = [0.0; 3];
            let mut t = 1.0;
            for f in &frags {
                for ch in 0..3 {
                    c[ch] += f.alpha * t * f.color[ch];
                }
                t *= 1.0 - f.alpha;
            }
            for ch in 0..3 {
                c[ch] += t * scene.background[ch];
            }
            fragments.push(frags);
            color.push(c);
        }
    }
    ABuffer {
        width: camera.width,
        height: camera.height,
        fragments,
        color,
    }
}

impl ABuffer {
    pub fn image(&self) -> Image {
        Image::from_rgb(self.width, self.height, &self.color)
    }
}

/// Surfels and Gaussians sorted together per pixel and alpha-composited front to back.
/// Gaussians use their centre depth and the same footprint cutoff as the splatter.
pub fn sorted_full_render(scene: &Scene, camera: &Camera) -> Image {
    let splats = project_gaussians(scene, camera);
    let mut out = Image::new(camera.width, camera.height, 3);
    for y in 0..camera.height {
        for x in 0..camera.width {
            // (depth, kind, id) -> (alpha, colour); kind orders surfels before Gaussians on ties
            let mut items: Vec<((f64, u8, u32), f64, [f64; 3])> = Vec::new();
            for f in rasterize_surfel_fragments(scene, camera, (x, y)) {
                items.push(((f.depth, 0, f.surfel_id), f.alpha, f.color));
            }
            for s in &splats {
                let dx = x as f64 + 0.5 - s.mean.x;
                let dy = y as f64 + 0.5 - s.mean.y;
                let d = nalgebra::Vector2::new(dx, dy);
                let power = 0.5 * d.dot(&(s.conic * d));
                if power <= MAX_POWER {
                    let a = (s.sigma * (-power).exp()).min(1.0);
                    items.push(((s.depth, 1, s.index), a, s.color));
                }
            }
            items.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut c = [0.0; 3];
            let mut t = 1.0;
            for (_, a, col) in &items {
                for ch in 0..3 {
                    c[ch] += a * t * col[ch];
                }
                t *= 1.0 - a;
            }
            let px = out.pixel_mut(x, y);
            for ch in 0..3 {
                px[ch] = c[ch] + t * scene.background[ch];
            }
        }
    }
    out
}

/// Central difference `(L(θ + h) − L(θ − h)) / 2h` for one scalar parameter.
pub fn fd_gradient<F: Fn(&Scene) -> f64>(scene: &Scene, loss: F, handle: &ParamHandle, h: f64) -> f64 {
    let theta = get_param(scene, handle);
    let mut s = scene.clone();
    set_param(&mut s, handle, theta + h);
    let plus = loss(&s);
    set_param(&mut s, handle, theta - h);
    let minus = loss(&s);
    (plus - minus) / (2.0 * h)
}

/// Hash of every discrete decision a render makes: peeled layer ids, opaque-core flags,
/// culling layer, active `(pixel, splat, interval)` samples and which Gaussians survive
/// projection. Two renders with equal signatures differ only through smooth quantities.
pub fn render_signature(r: &Render, camera: &Camera) -> u64 {
    let mut h = DefaultHasher::new();
    for px in &r.stack.pixels {
        px.count.hash(&mut h);
        for l in px.layers() {
            l.surfel_id.hash(&mut h);
            l.opaque.hash(&mut h);
        }
        px.cull.layer.hash(&mut h);
        px.cull.depth.is_finite().hash(&mut h);
    }
    for s in &r.splats {
        s.index.hash(&mut h);
    }
    let bins = bin_splats(&r.splats, camera);
    let tiles_x = camera.width.div_ceil(TILE_SIZE);
    let layers = r.layers();
    for y in 0..camera.height {
        for x in 0..camera.width {
            let px = &r.splat_stack().pixels[y * camera.width + x];
            for &si in &bins[(y / TILE_SIZE) * tiles_x + x / TILE_SIZE] {
                let s = &r.splats[si as usize];
                let [bx0, by0, bx1, by1] = s.bbox;
                if x < bx0 || x >= bx1 || y < by0 || y >= by1 {
                    continue;
                }
                if let Some(e) = sample_splat(s, px, layers, x, y, &r.surfel_eps) {
                    (x, y, s.index, e.interval).hash(&mut h);
                }
            }
        }
    }
    h.finish()
}

/// A fixed random linear functional of every render output. Its pixel gradients are the
/// weights themselves, so it exercises the backward pass without any loss code.
#[derive(Debug, Clone)]
pub struct ProbeLoss {
    pub weights: PixelGrads,
    pub layers: usize,
}

impl ProbeLoss {
    /// `extras` also puts weight on the surfel image, `T_L`, depth and normal outputs.
    pub fn random(camera: &Camera, layers: usize, seed: u64, extras: bool) -> Self {
        let n = camera.pixel_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = |rng: &mut ChaCha8Rng| -> Vec<[f64; 3]> {
            (0..n)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect()
        };
        let color = rgb(&mut rng);
        let mut weights = PixelGrads {
            color,
            ..Default::default()
        };
        if extras {
            weights.surfel_color = Some(rgb(&mut rng));
            weights.last_transmittance = Some((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
            weights.surfel_depth = Some((0..n).map(|_| rng.random_range(-0.2..0.2)).collect());
            weights.surfel_normal = Some(rgb(&mut rng));
        }
        ProbeLoss { weights, layers }
    }

    pub fn value(&self, r: &Render) -> f64 {
        let w = &self.weights;
        let mut total = 0.0;
        for i in 0..w.color.len() {
            let c = r.image.rgb(i);
            for ch in 0..3 {
                total += w.color[i][ch] * c[ch];
            }
            if let Some(g) = &w.surfel_color {
                for ch in 0..3 {
                    total += g[i][ch] * r.surfel.color[i][ch];
                }
            }
            if let Some(g) = &w.last_transmittance {
                total += g[i] * r.stack.pixels[i].transmittance[self.layers];
            }
            if let Some(g) = &w.surfel_depth {
                total += g[i] * r.surfel.depth[i];
            }
            if let Some(g) = &w.surfel_normal {
                for ch in 0..3 {
                    total += g[i][ch] * r.surfel.normal[i][ch];
                }
            }
        }
        total
    }
}

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_RTOL: f64 = 1e-4;
pub const GRAD_ATOL: f64 = 1e-7;

pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= GRAD_ATOL || diff <= GRAD_RTOL * analytic.abs().max(numeric.abs())
}

/// Relative error with an absolute floor, for reporting.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= GRAD_ATOL {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ClassReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_error: f64,
    pub failures: Vec<(ParamHandle, f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub classes: BTreeMap<ParamClass, ClassReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.classes.values().all(|c| c.failures.is_empty())
    }

    pub fn merge(&mut self, other: &GradReport) {
        for (k, v) in &other.classes {
            let c = self.classes.entry(*k).or_default();
            c.checked += v.checked;
            c.skipped += v.skipped;
            c.max_error = c.max_error.max(v.max_error);
            c.failures.extend(v.failures.iter().cloned());
        }
    }
}

/// True if the parameter sits at least `10 h` away from any discrete switch of `eval`.
pub fn away_from_boundary<F: Fn(&Scene) -> u64>(scene: &Scene, handle: &ParamHandle, h: f64, eval: F) -> bool {
    let theta = get_param(scene, handle);
    let base = eval(scene);
    let mut s = scene.clone();
    [-10.0, -1.0, 1.0, 10.0].iter().all(|k| {
        set_param(&mut s, handle, theta + k * h);
        eval(&s) == base
    })
}

/// Checks `backward` against central differences for every parameter of `scene` under a
/// probe loss. Parameters near a discrete boundary are counted as skipped.
pub fn check_scene_gradients(
    scene: &Scene,
    camera: &Camera,
    probe: &ProbeLoss,
    opts: &BackwardOptions,
) -> GradReport {
    let layers = probe.layers;
    let r = render(scene, camera, layers);
    let analytic = backward(scene, camera, &r, &probe.weights, opts).expect("tape matches scene");
    let fixed_stack = (!opts.transmittance_grad).then(|| r.stack.clone());
    let forward = |s: &Scene| render_with_splat_stack(s, camera, layers, fixed_stack.as_ref());
    let loss = |s: &Scene| probe.value(&forward(s));
    let sig = |s: &Scene| render_signature(&forward(s), camera);
    compare_all(scene, &analytic, loss, sig)
}

/// Shared FD loop: compares `analytic` against differences of `loss` for every parameter.
pub fn compare_all<L, S>(scene: &Scene, analytic: &SceneGrad, loss: L, signature: S) -> GradReport
where
    L: Fn(&Scene) -> f64,
    S: Fn(&Scene) -> u64,
{
    compare_all_with_step(scene, analytic, loss, signature, FD_STEP)
}

pub fn compare_all_with_step<L, S>(scene: &Scene, analytic: &SceneGrad, loss: L, signature: S, step: f64) -> GradReport
where
    L: Fn(&Scene) -> f64,
    S: Fn(&Scene) -> u64,
{
    let mut report = GradReport::default();
    for handle in all_handles(scene) {
        let class = param_class(&handle);
        let entry = report.classes.entry(class).or_default();
        // scales are compared in log units: a relative step, gradients w.r.t. log s
        let unit = if class == ParamClass::Scale { get_param(scene, &handle).abs() } else { 1.0 };
        let h = step * unit;
        if !away_from_boundary(scene, &handle, h, &signature) {
            entry.skipped += 1;
            continue;
        }
        let a = get_grad(analytic, &handle) * unit;
        let n = fd_gradient(scene, &loss, &handle, h) * unit;
        entry.checked += 1;
        entry.max_error = entry.max_error.max(grad_error(a, n));
        if !grad_close(a, n) {
            entry.failures.push((handle, a, n));
        }
    }
    report
}

/// Small random scene in front of a fixed camera, dense enough that rings overlap and
/// Gaussians land in several transmittance intervals.
pub fn micro_scene(seed: u64, surfels: usize, gaussians: usize, sh_degree: usize) -> (Scene, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = Camera::look_at(
        Vector3::new(0.0, 0.0, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        24,
        24,
        0.6,
    );
    let mut scene = Scene::empty(sh_degree);
    let k = scene.sh_count();
    let coeffs = |rng: &mut ChaCha8Rng| -> Vec<[f64; 3]> {
        (0..k)
            .map(|i| {
                let amp = if i == 0 { 1.0 } else { 0.3 };
                [0; 3].map(|_| rng.random_range(-amp..amp))
            })
            .collect()
    };
    let tilt = |rng: &mut ChaCha8Rng, max: f64| -> Quat {
        let axis: Vector3<f64> =
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3));
        let axis = axis / axis.norm().max(1e-9);
        let half = 0.5 * rng.random_range(-max..max);
        // raw quaternions are deliberately not unit length
        let scale = rng.random_range(0.8..1.25);
        Quat::new(half.cos(), axis.x * half.sin(), axis.y * half.sin(), axis.z * half.sin()) * scale
    };
    for _ in 0..surfels {
        let p = Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.5..0.5));
        let q = tilt(&mut rng, 0.7);
        let s = Vector2::new(rng.random_range(0.06..0.16), rng.random_range(0.06..0.16));
        let sh = coeffs(&mut rng);
        let mut surfel = Surfel::new(p, q, s, sh).expect("valid surfel");
        surfel.rotation = q;
        scene.surfels.push(surfel);
    }
    for _ in 0..gaussians {
        let p = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-1.0..0.6));
        let q = tilt(&mut rng, 3.0);
        let s = Vector3::new(rng.random_range(0.05..0.2), rng.random_range(0.05..0.2), rng.random_range(0.05..0.2));
        let sigma = rng.random_range(0.2..0.9);
        let sh = coeffs(&mut rng);
        let mut g = Gaussian::new(p, sigma, q, s, sh).expect("valid gaussian");
        g.rotation = q;
        scene.gaussians.push(g);
    }
    (scene, camera)
}

/// Larger random scene for the peel, ordering and leakage checks: tilted surfels and
/// Gaussians spread through a cube in front of a `size x size` camera.
pub fn random_scene(seed: u64, surfels: usize, gaussians: usize, size: usize) -> (Scene, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = Camera::look_at(
        Vector3::new(0.0, 0.0, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        size,
        size,
        0.7,
    );
    let mut scene = Scene::empty(1);
    scene.background = [0; 3].map(|_| rng.random_range(0.0..1.0));
    let k = scene.sh_count();
    let coeffs = |rng: &mut ChaCha8Rng| -> Vec<[f64; 3]> {
        (0..k)
            .map(|i| [0; 3].map(|_| rng.random_range(-1.0..1.0) * if i == 0 { 1.5 } else { 0.3 }))
            .collect()
    };
    let quat = |rng: &mut ChaCha8Rng| -> Quat {
        let q = Quat::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if q.norm() < 1e-3 {
            Quat::new(1.0, 0.0, 0.0, 0.0)
        } else {
            q.normalize()
        }
    };
    // keep the expected overlap per pixel moderate as the count grows
    let size_scale = (30.0 / surfels.max(1) as f64).sqrt().clamp(0.15, 1.0);
    for _ in 0..surfels {
        let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let s = Vector2::new(rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)) * size_scale;
        let q = quat(&mut rng);
        let sh = coeffs(&mut rng);
        scene.surfels.push(Surfel::new(p, q, s, sh).expect("valid surfel"));
    }
    for _ in 0..gaussians {
        let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.5..1.0));
        let s = Vector3::new(rng.random_range(0.02..0.15), rng.random_range(0.02..0.15), rng.random_range(0.02..0.15));
        let q = quat(&mut rng);
        let sigma = rng.random_range(0.1..1.0);
        let sh = coeffs(&mut rng);
        scene.gaussians.push(Gaussian::new(p, sigma, q, s, sh).expect("valid gaussian"));
    }
    crate::margin::apply_margins(&mut scene, false);
    (scene, camera)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> Camera {
        Camera::look_at(Vector3::new(0.0, 0.0, -4.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 12, 12, 0.7)
    }

    #[test]
    fn fd_of_constant_and_quadratic() {
        let mut scene = Scene::empty(0);
        scene.surfels.push(
            Surfel::new(Vector3::new(0.3, 0.0, 0.0), Quat::new(1.0, 0.0, 0.0, 0.0), Vector2::new(0.1, 0.1), vec![[0.0; 3]])
                .unwrap(),
        );
        let h = ParamHandle {
            kind: crate::params::PrimitiveKind::Surfel,
            index: 0,
            offset: 0,
        };
        assert_eq!(fd_gradient(&scene, |_| 7.0, &h, 1e-4), 0.0);
        let d = fd_gradient(&scene, |s| s.surfels[0].position.x.powi(2), &h, 1e-4);
        assert!((d - 0.6).abs() < 1e-10);
    }

    #[test]
    fn abuffer_of_empty_scene_is_background() {
        let mut scene = Scene::empty(0);
        scene.background = [0.1, 0.2, 0.3];
        let ab = abuffer_render_surfels(&scene, &camera());
        assert!(ab.color.iter().all(|c| *c == [0.1, 0.2, 0.3]));
        assert_eq!(sorted_full_render(&scene, &camera()).rgb(5), [0.1, 0.2, 0.3]);
    }

    #[test]
    fn truncated_tail_matches_hand_computation() {
        // five stacked half-transparent fragments at one pixel: the 3-layer pipeline drops
        // layers 4 and 5, whose oracle contribution is 0.5 * 2^-3 c4 + 0.5 * 2^-4 c5
        // plus the change in background weight
        let frags: Vec<_> = (0..5)
            .map(|i| SurfelFragment {
                depth: 1.0 + i as f64,
                alpha: 0.5,
                color: [i as f64 / 4.0; 3],
                surfel_id: i,
                local_r2: 1.0,
                local: [1.0, 0.0],
                opaque: false,
                normal: [0.0, 0.0, -1.0],
            })
            .collect();
        let px = crate::raster_surfel::peel_fragments(&frags, 3);
        let (c3, _, _, _) = crate::raster_surfel::blend_pixel(&px, &[1.0; 3]);
        let mut full = 0.0;
        let mut t = 1.0;
        for f in &frags {
            full += f.alpha * t * f.color[0];
            t *= 1.0 - f.alpha;
        }
        full += t;
        let tail = 0.0625 * 0.75 + 0.03125 * 1.0 + 0.03125 - 0.125;
        assert!((full - c3[0] - tail).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_fd_on_a_micro_scene() {
        let (scene, cam) = micro_scene(3, 3, 5, 1);
        let probe = ProbeLoss::random(&cam, 3, 9, true);
        let rep = check_scene_gradients(&scene, &cam, &probe, &BackwardOptions::default());
        for (k, c) in &rep.classes {
            eprintln!("{:?} checked {} skipped {} max {:e}", k, c.checked, c.skipped, c.max_error);
            for f in c.failures.iter().take(5) {
                eprintln!("  {} analytic {:e} fd {:e}", f.0, f.1, f.2);
            }
        }
        assert!(rep.passed());
    }
}
