//! Analytic initializers and the bundled toy scenes.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composite::render;
use crate::dataset::{Dataset, View};
use crate::losses::GeometryTarget;
use crate::math::{rgb_to_sh0, Quat};
use crate::scene::{Camera, Gaussian, Scene, Surfel};

use super::{Ablation, LearningRates, TrainConfig};

/// Analytic geometry to seed a scene from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Recipe {
    Empty,
    /// Square of side `size` in the `z = 0` plane, facing `-z`.
    Plane {
        surfels: usize,
        gaussians: usize,
        size: f64,
        jitter: f64,
    },
    /// Sphere about the origin with outward normals.
    Sphere {
        surfels: usize,
        gaussians: usize,
        radius: f64,
        jitter: f64,
    },
}

/// Rotation whose third column is `n`, as a `(w, x, y, z)` quaternion.
pub fn quat_facing(n: &Vector3<f64>) -> Quat {
    let q = UnitQuaternion::rotation_between(&Vector3::z(), n)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
    Quat::new(q.w, q.i, q.j, q.k)
}

fn color_sh(k: usize, rgb: [f64; 3]) -> Vec<[f64; 3]> {
    let mut sh = vec![[0.0; 3]; k];
    sh[0] = rgb.map(rgb_to_sh0);
    sh
}

fn random_rgb(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(0.1..0.9))
}

fn unit_jitter(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

/// Small Gaussians scattered over the discs of the given surfels.
fn gaussians_near(scene: &mut Scene, count: usize, rng: &mut ChaCha8Rng) {
    let k = scene.sh_count();
    if scene.surfels.is_empty() {
        return;
    }
    for _ in 0..count {
        let s = &scene.surfels[rng.random_range(0..scene.surfels.len())];
        let m = s.rotation_matrix();
        let u: f64 = rng.random_range(-1.5..1.5);
        let v: f64 = rng.random_range(-1.5..1.5);
        let h: f64 = rng.random_range(-0.5..0.5);
        let mean = 0.5 * (s.scale.x + s.scale.y);
        let p = s.position
            + m.column(0) * (u * s.scale.x)
            + m.column(1) * (v * s.scale.y)
            + m.column(2) * (h * mean);
        let scale = Vector3::repeat(0.3 * mean);
        let g = Gaussian::new(p, rng.random_range(0.3..0.8), Quat::new(1.0, 0.0, 0.0, 0.0), scale, color_sh(k, random_rgb(rng)))
            .expect("toy Gaussian is valid");
        scene.gaussians.push(g);
    }
}

pub fn init_toy(recipe: &Recipe, sh_degree: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = Scene::empty(sh_degree);
    let k = scene.sh_count();
    match *recipe {
        Recipe::Empty => {}
        Recipe::Plane {
            surfels,
            gaussians,
            size,
            jitter,
        } => {
            let side = (surfels as f64).sqrt().ceil().max(1.0) as usize;
            let step = size / side as f64;
            for i in 0..surfels {
                let (gx, gy) = ((i % side) as f64, (i / side) as f64);
                let base = Vector3::new(-0.5 * size + (gx + 0.5) * step, -0.5 * size + (gy + 0.5) * step, 0.0);
                let p = base + unit_jitter(&mut rng) * jitter;
                let n = (Vector3::new(0.0, 0.0, -1.0) + unit_jitter(&mut rng) * jitter).normalize();
                let s = Surfel::new(p, quat_facing(&n), Vector2::repeat(0.3 * step), color_sh(k, random_rgb(&mut rng)))
                    .expect("toy surfel is valid");
                scene.surfels.push(s);
            }
            gaussians_near(&mut scene, gaussians, &mut rng);
        }
        Recipe::Sphere {
            surfels,
            gaussians,
            radius,
            jitter,
        } => {
            // Fibonacci lattice
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let spacing = radius * (4.0 * std::f64::consts::PI / surfels.max(1) as f64).sqrt();
            for i in 0..surfels {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / surfels as f64;
                let r = (1.0 - y * y).sqrt();
                let th = golden * i as f64;
                let dir = Vector3::new(r * th.cos(), y, r * th.sin());
                let n = (dir + unit_jitter(&mut rng) * jitter).normalize();
                let p = dir * radius + unit_jitter(&mut rng) * (jitter * radius);
                let s = Surfel::new(p, quat_facing(&n), Vector2::repeat(0.3 * spacing), color_sh(k, random_rgb(&mut rng)))
                    .expect("toy surfel is valid");
                scene.surfels.push(s);
            }
            gaussians_near(&mut scene, gaussians, &mut rng);
        }
    }
    scene
}

/// `n` cameras on a horizontal arc of `spread` radians around `target`, at `distance`.
pub fn arc_cameras(n: usize, distance: f64, spread: f64, width: usize, height: usize, fov: f64) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 - 0.5 };
            let yaw = t * spread;
            let pitch = 0.15 * (if i % 2 == 0 { 1.0 } else { -1.0 }) * (spread / 1.0).min(1.0);
            let eye = Vector3::new(yaw.sin() * pitch.cos(), pitch.sin(), -yaw.cos() * pitch.cos()) * distance;
            Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), width, height, fov)
        })
        .collect()
}

fn facing_surfel(k: usize, p: [f64; 3], scale: f64, rgb: [f64; 3]) -> Surfel {
    Surfel::new(
        Vector3::from(p),
        Quat::new(1.0, 0.0, 0.0, 0.0),
        Vector2::repeat(scale),
        color_sh(k, rgb),
    )
    .expect("toy surfel is valid")
}

/// A scene plus the cameras it is meant to be viewed from.
#[derive(Debug, Clone)]
pub struct Toy {
    pub name: &'static str,
    pub scene: Scene,
    pub cameras: Vec<Camera>,
}

pub const BUNDLED: [&str; 5] = ["overlap-rings", "plane-grid", "sphere", "occluder-box", "two-surfel"];

/// Three ring surfels in a row in front of an opaque wall that fills the view. At most
/// three surfels overlap before the wall, so every pixel reaches zero transmittance
/// within three layers, but two layers are not enough where rings overlap.
pub fn overlap_rings(size: usize) -> Toy {
    let mut scene = Scene::empty(0);
    scene.background = [1.0, 1.0, 1.0];
    scene.surfels.push(facing_surfel(1, [0.0, 0.0, 1.5], 1.5, [0.2, 0.2, 0.25]));
    scene.surfels.push(facing_surfel(1, [-0.9, 0.0, 0.0], 0.25, [0.9, 0.2, 0.1]));
    scene.surfels.push(facing_surfel(1, [0.0, 0.0, 0.15], 0.25, [0.1, 0.8, 0.2]));
    scene.surfels.push(facing_surfel(1, [0.9, 0.0, 0.3], 0.25, [0.2, 0.3, 0.9]));
    let cameras = vec![Camera::look_at(
        Vector3::new(0.0, 0.0, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        size,
        size,
        0.7,
    )];
    Toy {
        name: "overlap-rings",
        scene,
        cameras,
    }
}

pub fn plane_grid(size: usize, seed: u64) -> Toy {
    let mut scene = init_toy(
        &Recipe::Plane {
            surfels: 64,
            gaussians: 32,
            size: 2.0,
            jitter: 0.02,
        },
        1,
        seed,
    );
    scene.background = [0.0; 3];
    Toy {
        name: "plane-grid",
        scene,
        cameras: arc_cameras(8, 4.0, 1.0, size, size, 0.7),
    }
}

pub fn sphere(size: usize, seed: u64) -> Toy {
    let scene = init_toy(
        &Recipe::Sphere {
            surfels: 100,
            gaussians: 32,
            radius: 0.8,
            jitter: 0.01,
        },
        1,
        seed,
    );
    Toy {
        name: "sphere",
        scene,
        cameras: arc_cameras(8, 4.0, 2.0, size, size, 0.7),
    }
}

/// Margin-leak construction. An opaque wall is the third layer behind two overlapping
/// rings; a small Gaussian sits `gap` behind the wall where the rings overlap. The wall's
/// own margin exceeds `gap`, but its sixteen small neighbours have margins below it.
pub fn occluder_box(size: usize, gap: f64) -> Toy {
    let mut scene = Scene::empty(0);
    scene.surfels.push(facing_surfel(1, [0.0, 0.0, 1.0], 0.6, [0.8, 0.8, 0.8]));
    scene.surfels.push(facing_surfel(1, [-0.45, 0.0, 0.0], 0.15, [0.9, 0.3, 0.2]));
    scene.surfels.push(facing_surfel(1, [0.45, 0.0, 0.2], 0.15, [0.2, 0.3, 0.9]));
    for i in 0..16 {
        let (gx, gy) = ((i % 4) as f64 - 1.5, (i / 4) as f64 - 1.5);
        scene
            .surfels
            .push(facing_surfel(1, [0.08 * gx, 0.08 * gy, 1.1], 0.02, [0.5, 0.5, 0.5]));
    }
    let g = Gaussian::new(
        Vector3::new(0.0, 0.0, 1.0 + gap),
        1.0,
        Quat::new(1.0, 0.0, 0.0, 0.0),
        Vector3::repeat(0.03),
        color_sh(1, [1.0, 1.0, 0.0]),
    )
    .expect("toy Gaussian is valid");
    scene.gaussians.push(g);
    let cameras = vec![Camera::look_at(
        Vector3::new(0.0, 0.0, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        size,
        size,
        0.7,
    )];
    Toy {
        name: "occluder-box",
        scene,
        cameras,
    }
}

/// Two facing surfels whose opaque cores and boundary rings partly overlap.
pub fn two_surfel(size: usize) -> Toy {
    let mut scene = Scene::empty(0);
    scene.surfels.push(facing_surfel(1, [-0.3, 0.0, 0.0], 0.25, [0.9, 0.4, 0.1]));
    scene.surfels.push(facing_surfel(1, [0.3, 0.0, 0.1], 0.25, [0.1, 0.4, 0.9]));
    let cameras = vec![Camera::look_at(
        Vector3::new(0.0, 0.0, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        size,
        size,
        0.7,
    )];
    Toy {
        name: "two-surfel",
        scene,
        cameras,
    }
}

/// Hidden scene for self-consistency fits: four surfels forming a backdrop and a floor
/// with Gaussians floating in front of them.
pub fn self_consistency_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = Scene::empty(0);
    scene.background = [0.0; 3];
    let k = scene.sh_count();
    let quads = [[-0.6, -0.6, 0.6], [0.6, -0.6, 0.7], [-0.6, 0.6, 0.8], [0.6, 0.6, 0.5]];
    for p in quads {
        let n = (Vector3::new(0.0, 0.0, -1.0) + unit_jitter(&mut rng) * 0.15).normalize();
        let s = Surfel::new(Vector3::from(p), quat_facing(&n), Vector2::new(0.35, 0.35), color_sh(k, random_rgb(&mut rng)))
            .expect("valid surfel");
        scene.surfels.push(s);
    }
    for _ in 0..32 {
        let p = Vector3::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.6..0.3));
        let q = Quat::new(1.0, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let s = Vector3::new(rng.random_range(0.04..0.12), rng.random_range(0.04..0.12), rng.random_range(0.04..0.12));
        let g = Gaussian::new(p, rng.random_range(0.4..0.9), q, s, color_sh(k, random_rgb(&mut rng))).expect("valid");
        scene.gaussians.push(g);
    }
    crate::margin::apply_margins(&mut scene, false);
    scene
}

/// Starting point for a self-consistency fit: the hidden scene with jittered positions
/// and randomized colours and Gaussian opacities.
pub fn perturb(hidden: &Scene, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = hidden.clone();
    let mut jitter = |r: f64| Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r));
    for x in &mut s.surfels {
        x.position += jitter(0.03);
    }
    for g in &mut s.gaussians {
        g.position += jitter(0.05);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for x in &mut s.surfels {
        x.sh[0] = [0; 3].map(|_| rgb_to_sh0(rng.random_range(0.2..0.8)));
    }
    for g in &mut s.gaussians {
        g.sh[0] = [0; 3].map(|_| rgb_to_sh0(rng.random_range(0.2..0.8)));
        g.sigma = rng.random_range(0.3..0.8);
    }
    s
}

/// Training settings for the self-consistency fit. Primitive counts are fixed (no
/// densification, splitting or pruning), so the fit isolates the optimizer and gradients;
/// position and colour rates are raised because the toy is small and short.
pub fn self_consistency_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        seed: 5,
        lr: LearningRates {
            position: 2e-3,
            position_final: 2e-4,
            color: 1e-2,
            opacity: 1e-2,
            ..Default::default()
        },
        ablation: Ablation {
            no_densify: true,
            no_split: true,
            ..Default::default()
        },
        prune_period: 0,
        ..Default::default()
    }
}

/// Hidden scene, its eight 64x64 views and the perturbed starting scene.
pub fn self_consistency_setup() -> (Scene, Dataset, Scene) {
    let hidden = self_consistency_scene(7);
    let cameras = arc_cameras(8, 4.0, 1.0, 64, 64, 0.7);
    let data = render_dataset(&hidden, &cameras, 3);
    let init = perturb(&hidden, 11);
    (hidden, data, init)
}

pub fn bundled(name: &str, size: usize, seed: u64) -> Option<Toy> {
    Some(match name {
        "overlap-rings" => overlap_rings(size),
        "plane-grid" => plane_grid(size, seed),
        "sphere" => sphere(size, seed),
        "occluder-box" => occluder_box(size, 0.5),
        "two-surfel" => two_surfel(size),
        _ => return None,
    })
}

/// Renders ground-truth images (and depth/normal references) for every camera.
pub fn render_dataset(scene: &Scene, cameras: &[Camera], layers: usize) -> Dataset {
    let views = cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let r = render(scene, cam, layers);
            let mask: Vec<bool> = r.stack.pixels.iter().map(|p| p.count > 0).collect();
            View {
                name: format!("view_{i:03}"),
                camera: cam.clone(),
                image: r.image.clone(),
                geometry: Some(GeometryTarget {
                    depth: r.surfel.depth.clone(),
                    normal: r.surfel.normal.clone(),
                    mask,
                }),
            }
        })
        .collect();
    Dataset { views }
}
