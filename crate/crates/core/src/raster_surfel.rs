//! Surfel rasterization and per-pixel depth peeling.
//!
//! Each surfel is a disc in its local XY plane. A pixel ray is intersected exactly with
//! the disc plane, and the local coordinates `(x, y)` (in units of the surfel scale)
//! give the opacity `min(1, w * exp(-(x^2 + y^2) / 2))`. Fragments are generated only
//! where that opacity is at least 1/255.
//!
//! Peeling runs `L` passes per pixel. Pass `k` keeps the nearest fragment whose
//! `(depth, surfel_id)` key is strictly greater than the key kept by pass `k - 1`, so a
//! surfel is never peeled twice and equal-depth fragments are ordered by id.

use std::cmp::Ordering;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::math::sh_eval;
use crate::scene::{Camera, Scene, Surfel};

pub const MAX_LAYERS: usize = 4;
pub const TILE_SIZE: usize = 16;

/// Smallest opacity that still produces a fragment.
pub const MIN_FRAGMENT_ALPHA: f64 = 1.0 / 255.0;

/// Opacity kernel `min(1, w * exp(-r2 / 2))` with its two radii precomputed.
#[derive(Debug, Clone, Copy)]
pub struct Kernel {
    pub w: f64,
    /// `r2` at or below which the kernel is exactly 1.
    pub r2_opaque: f64,
    /// `r2` beyond which no fragment is emitted.
    pub r2_support: f64,
}

impl Kernel {
    pub fn new(w: f64) -> Self {
        Kernel {
            w,
            r2_opaque: 2.0 * w.ln(),
            r2_support: 2.0 * (w / MIN_FRAGMENT_ALPHA).ln(),
        }
    }

    /// Returns `(alpha, opaque)`.
    pub fn alpha(&self, r2: f64) -> (f64, bool) {
        if r2 <= self.r2_opaque {
            (1.0, true)
        } else {
            ((self.w * (-0.5 * r2).exp()).min(1.0), false)
        }
    }
}

/// A surfel transformed into one camera.
#[derive(Debug, Clone)]
pub struct SurfelView {
    /// Centre in camera space.
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub scale: [f64; 2],
    /// One colour per surfel per view, evaluated towards the camera.
    pub color: [f64; 3],
    /// World-space unit vector from the centre to the camera.
    pub view_dir: Vector3<f64>,
    /// Pixel bounds `[x0, y0, x1, y1)` of the support disc, if on screen.
    pub bbox: Option<[usize; 4]>,
}

pub fn prepare_surfel(surfel: &Surfel, camera: &Camera, kernel: &Kernel) -> SurfelView {
    let rot = camera.rotation * surfel.rotation_matrix();
    let center = camera.world_to_camera(&surfel.position);
    let to_cam = camera.center() - surfel.position;
    let view_dir = to_cam / to_cam.norm();
    let mut view = SurfelView {
        center,
        axis_u: rot.column(0).into_owned(),
        axis_v: rot.column(1).into_owned(),
        normal: rot.column(2).into_owned(),
        scale: [surfel.scale.x, surfel.scale.y],
        color: sh_eval(&surfel.sh, &view_dir),
        view_dir,
        bbox: None,
    };
    view.bbox = support_bbox(&view, camera, kernel);
    view
}

pub fn prepare_surfels(scene: &Scene, camera: &Camera) -> Vec<SurfelView> {
    let kernel = Kernel::new(scene.opacity_modulation);
    scene
        .surfels
        .iter()
        .map(|s| prepare_surfel(s, camera, &kernel))
        .collect()
}

/// Screen bounds of the octagon circumscribing the support disc. Falls back to the
/// whole screen when part of the octagon is behind the near plane.
fn support_bbox(view: &SurfelView, camera: &Camera, kernel: &Kernel) -> Option<[usize; 4]> {
    let full = Some([0, 0, camera.width, camera.height]);
    let radius = kernel.r2_support.max(0.0).sqrt() / (std::f64::consts::PI / 8.0).cos();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    let mut behind = 0;
    for k in 0..8 {
        let a = k as f64 * std::f64::consts::FRAC_PI_4;
        let p = view.center
            + view.axis_u * (view.scale[0] * radius * a.cos())
            + view.axis_v * (view.scale[1] * radius * a.sin());
        if p.z <= camera.near {
            behind += 1;
            continue;
        }
        let u = camera.fx * p.x / p.z + camera.cx;
        let v = camera.fy * p.y / p.z + camera.cy;
        x0 = x0.min(u);
        y0 = y0.min(v);
        x1 = x1.max(u);
        y1 = y1.max(v);
    }
    // the octagon is convex: all vertices behind means the whole disc is
    match behind {
        0 => clip_bbox(x0, y0, x1, y1, camera),
        8 => None,
        _ => full,
    }
}

pub(crate) fn clip_bbox(x0: f64, y0: f64, x1: f64, y1: f64, camera: &Camera) -> Option<[usize; 4]> {
    let (w, h) = (camera.width as f64, camera.height as f64);
    if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
        return Some([0, 0, camera.width, camera.height]);
    }
    if x1 < 0.0 || y1 < 0.0 || x0 > w || y0 > h {
        return None;
    }
    let lo = |v: f64| (v.floor() - 1.0).max(0.0) as usize;
    let hi = |v: f64, m: f64| (v.ceil() + 1.0).min(m) as usize;
    Some([lo(x0), lo(y0), hi(x1, w), hi(y1, h)])
}

/// One surfel sample along a pixel ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfelFragment {
    /// Camera-space z of the hit.
    pub depth: f64,
    pub alpha: f64,
    pub color: [f64; 3],
    pub surfel_id: u32,
    /// `x^2 + y^2` in surfel-local units.
    pub local_r2: f64,
    pub local: [f64; 2],
    pub opaque: bool,
    /// Camera-space unit normal, flipped to face the camera.
    pub normal: [f64; 3],
}

impl SurfelFragment {
    pub const EMPTY: SurfelFragment = SurfelFragment {
        depth: f64::INFINITY,
        alpha: 0.0,
        color: [0.0; 3],
        surfel_id: u32::MAX,
        local_r2: f64::INFINITY,
        local: [0.0; 2],
        opaque: false,
        normal: [0.0; 3],
    };

    /// Lexicographic `(depth, surfel_id)` order used by peeling.
    pub fn key_cmp(&self, other: &Self) -> Ordering {
        self.depth
            .total_cmp(&other.depth)
            .then(self.surfel_id.cmp(&other.surfel_id))
    }
}

/// Ray–disc intersection for a camera-space ray `d` (with `d.z == 1`).
pub fn surfel_fragment(
    view: &SurfelView,
    id: u32,
    ray: &Vector3<f64>,
    kernel: &Kernel,
    near: f64,
    far: f64,
) -> Option<SurfelFragment> {
    let denom = view.normal.dot(ray);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = view.normal.dot(&view.center) / denom;
    if !(t > near && t < far) {
        return None;
    }
    let h = ray * t - view.center;
    let x = view.axis_u.dot(&h) / view.scale[0];
    let y = view.axis_v.dot(&h) / view.scale[1];
    let r2 = x * x + y * y;
    if !(r2 <= kernel.r2_support) {
        return None;
    }
    let (alpha, opaque) = kernel.alpha(r2);
    let n = if denom > 0.0 { -view.normal } else { view.normal };
    Some(SurfelFragment {
        depth: t,
        alpha,
        color: view.color,
        surfel_id: id,
        local_r2: r2,
        local: [x, y],
        opaque,
        normal: [n.x, n.y, n.z],
    })
}

/// All surfel fragments along one pixel's ray, in surfel-id order (unsorted by depth).
pub fn rasterize_surfel_fragments(
    scene: &Scene,
    camera: &Camera,
    pixel: (usize, usize),
) -> Vec<SurfelFragment> {
    let kernel = Kernel::new(scene.opacity_modulation);
    let ray = camera.pixel_ray(pixel.0, pixel.1);
    scene
        .surfels
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let view = prepare_surfel(s, camera, &kernel);
            surfel_fragment(&view, i as u32, &ray, &kernel, camera.near, camera.far)
        })
        .collect()
}

/// Depth used to cull Gaussians at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CullDepth {
    /// `+inf` means nothing is culled.
    pub depth: f64,
    /// Zero-based layer that defines `depth`.
    pub layer: Option<usize>,
}

impl CullDepth {
    pub const NONE: CullDepth = CullDepth {
        depth: f64::INFINITY,
        layer: None,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeelPixel {
    pub layers: [SurfelFragment; MAX_LAYERS],
    pub count: usize,
    /// `T_0..T_L`; entries past `count` repeat `T_count`.
    pub transmittance: [f64; MAX_LAYERS + 1],
    pub cull: CullDepth,
}

impl PeelPixel {
    pub fn layers(&self) -> &[SurfelFragment] {
        &self.layers[..self.count]
    }
}

/// Peeled layers for a whole image.
#[derive(Debug, Clone, PartialEq)]
pub struct PeelStack {
    pub width: usize,
    pub height: usize,
    pub layers: usize,
    pub pixels: Vec<PeelPixel>,
}

impl PeelStack {
    pub fn pixel(&self, x: usize, y: usize) -> &PeelPixel {
        &self.pixels[y * self.width + x]
    }

    /// `T_k` over the whole image.
    pub fn transmittance_map(&self, k: usize) -> Vec<f64> {
        self.pixels.iter().map(|p| p.transmittance[k]).collect()
    }
}

/// Builds a pixel from already-ordered layers: transmittance ladder plus culling depth.
pub fn finish_pixel(ordered: &[SurfelFragment], layers: usize) -> PeelPixel {
    let mut px = PeelPixel {
        layers: [SurfelFragment::EMPTY; MAX_LAYERS],
        count: ordered.len().min(layers),
        transmittance: [1.0; MAX_LAYERS + 1],
        cull: CullDepth::NONE,
    };
    px.layers[..px.count].copy_from_slice(&ordered[..px.count]);
    for k in 1..=MAX_LAYERS {
        let a = if k <= px.count { px.layers[k - 1].alpha } else { 0.0 };
        px.transmittance[k] = px.transmittance[k - 1] * (1.0 - a);
    }
    px.cull = pixel_culling_depth(&px, layers);
    px
}

/// Nearest layer whose transmittance is exactly zero; otherwise the deepest layer when all
/// `L` are present; otherwise no culling.
pub fn pixel_culling_depth(px: &PeelPixel, layers: usize) -> CullDepth {
    for k in 1..=px.count {
        if px.transmittance[k] == 0.0 {
            return CullDepth {
                depth: px.layers[k - 1].depth,
                layer: Some(k - 1),
            };
        }
    }
    if px.count == layers && layers > 0 {
        return CullDepth {
            depth: px.layers[layers - 1].depth,
            layer: Some(layers - 1),
        };
    }
    CullDepth::NONE
}

pub fn culling_depth(stack: &PeelStack) -> Vec<CullDepth> {
    stack
        .pixels
        .iter()
        .map(|p| pixel_culling_depth(p, stack.layers))
        .collect()
}

/// Surfel ids per screen tile, in id order.
pub(crate) fn bin_surfels(views: &[SurfelView], camera: &Camera) -> Vec<Vec<u32>> {
    let tx = camera.width.div_ceil(TILE_SIZE);
    let ty = camera.height.div_ceil(TILE_SIZE);
    let mut bins = vec![Vec::new(); tx * ty];
    for (i, v) in views.iter().enumerate() {
        let Some([x0, y0, x1, y1]) = v.bbox else { continue };
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

/// Runs `per_row` over every image row in parallel, one task per row of tiles, and
/// concatenates the results in row order.
pub(crate) fn map_tile_rows<T, F>(camera: &Camera, per_row: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, usize) -> Vec<T> + Sync,
{
    let rows = camera.height.div_ceil(TILE_SIZE);
    let chunks: Vec<Vec<T>> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let y0 = r * TILE_SIZE;
            let y1 = (y0 + TILE_SIZE).min(camera.height);
            per_row(y0, y1)
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

/// `L` peeling passes over the candidate fragments of one pixel.
pub fn peel_fragments(fragments: &[SurfelFragment], layers: usize) -> PeelPixel {
    let mut ordered = [SurfelFragment::EMPTY; MAX_LAYERS];
    let mut n = 0;
    let mut prev: Option<SurfelFragment> = None;
    for _ in 0..layers {
        let mut best: Option<&SurfelFragment> = None;
        for f in fragments {
            let behind_prev = prev.is_none_or(|p| f.key_cmp(&p) == Ordering::Greater);
            if behind_prev && best.is_none_or(|b| f.key_cmp(b) == Ordering::Less) {
                best = Some(f);
            }
        }
        match best {
            Some(f) => {
                ordered[n] = *f;
                n += 1;
                prev = Some(*f);
            }
            None => break,
        }
    }
    finish_pixel(&ordered[..n], layers)
}

pub fn peel_views(views: &[SurfelView], camera: &Camera, kernel: &Kernel, layers: usize) -> PeelStack {
    assert!(
        (1..=MAX_LAYERS).contains(&layers),
        "layer count {layers} outside 1..={MAX_LAYERS}"
    );
    let bins = bin_surfels(views, camera);
    let tiles_x = camera.width.div_ceil(TILE_SIZE);
    let pixels = map_tile_rows(camera, |y0, y1| {
        let mut out = Vec::with_capacity((y1 - y0) * camera.width);
        let mut frags = Vec::new();
        for y in y0..y1 {
            for x in 0..camera.width {
                let bin = &bins[(y / TILE_SIZE) * tiles_x + x / TILE_SIZE];
                let ray = camera.pixel_ray(x, y);
                frags.clear();
                for &id in bin {
                    let v = &views[id as usize];
                    let [bx0, by0, bx1, by1] = v.bbox.unwrap();
                    if x < bx0 || x >= bx1 || y < by0 || y >= by1 {
                        continue;
                    }
                    if let Some(f) = surfel_fragment(v, id, &ray, kernel, camera.near, camera.far) {
                        frags.push(f);
                    }
                }
                out.push(peel_fragments(&frags, layers));
            }
        }
        out
    });
    PeelStack {
        width: camera.width,
        height: camera.height,
        layers,
        pixels,
    }
}

/// Depth-peels the scene's surfels into `layers` layers (2, 3 or 4 in practice).
pub fn peel(scene: &Scene, camera: &Camera, layers: usize) -> PeelStack {
    let kernel = Kernel::new(scene.opacity_modulation);
    let views = prepare_surfels(scene, camera);
    peel_views(&views, camera, &kernel, layers)
}

/// Alpha-blended surfel buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfelBlend {
    pub color: Vec<[f64; 3]>,
    /// Explicit sum of compositing weights, including the background term.
    pub weight: Vec<f64>,
    /// Blended layer depth (no background term).
    pub depth: Vec<f64>,
    /// Blended layer normal (no background term).
    pub normal: Vec<[f64; 3]>,
}

pub fn blend_pixel(px: &PeelPixel, background: &[f64; 3]) -> ([f64; 3], f64, f64, [f64; 3]) {
    let mut c = [0.0; 3];
    let mut w = 0.0;
    let mut d = 0.0;
    let mut n = [0.0; 3];
    for (i, l) in px.layers().iter().enumerate() {
        let wi = l.alpha * px.transmittance[i];
        for ch in 0..3 {
            c[ch] += wi * l.color[ch];
            n[ch] += wi * l.normal[ch];
        }
        d += wi * l.depth;
        w += wi;
    }
    let tail = px.transmittance[px.count];
    for ch in 0..3 {
        c[ch] += tail * background[ch];
    }
    (c, w + tail, d, n)
}

pub fn blend_surfels(stack: &PeelStack, background: &[f64; 3]) -> SurfelBlend {
    let n = stack.pixels.len();
    let mut out = SurfelBlend {
        color: Vec::with_capacity(n),
        weight: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        normal: Vec::with_capacity(n),
    };
    for px in &stack.pixels {
        let (c, w, d, nn) = blend_pixel(px, background);
        out.color.push(c);
        out.weight.push(w);
        out.depth.push(d);
        out.normal.push(nn);
    }
    out
}

/// Per-surfel first-layer pixel count and total fragment count over one view.
pub fn surfel_coverage(scene: &Scene, camera: &Camera, layers: usize) -> Vec<(u64, u64)> {
    let kernel = Kernel::new(scene.opacity_modulation);
    let views = prepare_surfels(scene, camera);
    let mut cov = vec![(0u64, 0u64); views.len()];
    for y in 0..camera.height {
        for x in 0..camera.width {
            let ray = camera.pixel_ray(x, y);
            let frags: Vec<_> = views
                .iter()
                .enumerate()
                .filter(|(_, v)| {
                    v.bbox
                        .is_some_and(|[x0, y0, x1, y1]| x >= x0 && x < x1 && y >= y0 && y < y1)
                })
                .filter_map(|(i, v)| {
                    surfel_fragment(v, i as u32, &ray, &kernel, camera.near, camera.far)
                })
                .collect();
            for f in &frags {
                cov[f.surfel_id as usize].1 += 1;
            }
            let px = peel_fragments(&frags, layers);
            if px.count > 0 {
                cov[px.layers[0].surfel_id as usize].0 += 1;
            }
        }
    }
    cov
}
