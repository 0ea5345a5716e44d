//! Scene primitives, cameras, and the binary scene container.
//!
//! The container is a fixed 8-byte magic, a little-endian `u64` header length, a JSON
//! header, and then one little-endian `f64` block for surfels followed by one for
//! Gaussians. Every parameter is stored at full precision so that a save/load cycle
//! is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{quat_to_matrix, sh_coeff_count, Quat, MAX_SH_DEGREE};

/// Opacity modulation used unless a scene overrides it.
pub const DEFAULT_OPACITY_MODULATION: f64 = 30.0;

const MAGIC: &[u8; 8] = b"PSPLSCN1";
const FORMAT_VERSION: u32 = 1;

/// Quaternions further than this from unit length are renormalized on load.
const RENORMALIZE_TOLERANCE: f64 = 1e-9;

/// Flat disc primitive: opaque core, Gaussian-falloff boundary ring.
#[derive(Debug, Clone, PartialEq)]
pub struct Surfel {
    pub position: Vector3<f64>,
    /// `(w, x, y, z)`; unit length.
    pub rotation: Quat,
    /// Extent along the local X and Y axes.
    pub scale: Vector2<f64>,
    /// SH coefficients, `sh[k][channel]`.
    pub sh: Vec<[f64; 3]>,
    /// Depth margin used when this surfel defines the culling depth.
    pub eps: f64,
}

/// Volumetric 3D Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Peak opacity in `(0, 1]`.
    pub sigma: f64,
    pub rotation: Quat,
    pub scale: Vector3<f64>,
    pub sh: Vec<[f64; 3]>,
}

fn unit_quat(q: Quat, kind: &'static str, index: usize) -> Result<Quat> {
    let n = q.norm();
    if !n.is_finite() || n < 1e-12 {
        return Err(Error::Invariant {
            kind,
            index,
            reason: format!("degenerate rotation quaternion {:?}", q.as_slice()),
        });
    }
    if (n - 1.0).abs() > RENORMALIZE_TOLERANCE {
        Ok(q / n)
    } else {
        Ok(q)
    }
}

fn finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

impl Surfel {
    /// Builds a surfel, normalizing the rotation and checking invariants.
    pub fn new(
        position: Vector3<f64>,
        rotation: Quat,
        scale: Vector2<f64>,
        sh: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let eps = 2.5 * (scale.x + scale.y);
        let s = Surfel {
            position,
            rotation: unit_quat(rotation, "surfel", 0)?,
            scale,
            sh,
            eps: if eps.is_finite() { eps.max(0.0) } else { 0.0 },
        };
        s.check(0)?;
        Ok(s)
    }

    /// Rotation of the normalized quaternion.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&(self.rotation / self.rotation.norm()))
    }

    /// Unit normal (local Z axis) in world space.
    pub fn normal(&self) -> Vector3<f64> {
        self.rotation_matrix().column(2).into_owned()
    }

    pub(crate) fn check(&self, index: usize) -> Result<()> {
        let bad = |reason: String| Error::Invariant {
            kind: "surfel",
            index,
            reason,
        };
        if !finite(self.position.as_slice())
            || !finite(self.rotation.as_slice())
            || !self.sh.iter().all(|c| finite(c))
        {
            return Err(bad("non-finite parameter".into()));
        }
        if !(self.scale.x > 0.0 && self.scale.y > 0.0) {
            return Err(bad(format!("non-positive scale {:?}", self.scale.as_slice())));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(bad(format!("invalid margin {}", self.eps)));
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-6 {
            return Err(bad("rotation is not unit length".into()));
        }
        Ok(())
    }
}

impl Gaussian {
    pub fn new(
        position: Vector3<f64>,
        sigma: f64,
        rotation: Quat,
        scale: Vector3<f64>,
        sh: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let g = Gaussian {
            position,
            sigma,
            rotation: unit_quat(rotation, "gaussian", 0)?,
            scale,
            sh,
        };
        g.check(0)?;
        Ok(g)
    }

    /// Rotation of the normalized quaternion.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&(self.rotation / self.rotation.norm()))
    }

    pub fn mean_scale(&self) -> f64 {
        self.scale.sum() / 3.0
    }

    pub(crate) fn check(&self, index: usize) -> Result<()> {
        let bad = |reason: String| Error::Invariant {
            kind: "gaussian",
            index,
            reason,
        };
        if !finite(self.position.as_slice())
            || !finite(self.rotation.as_slice())
            || !self.sh.iter().all(|c| finite(c))
        {
            return Err(bad("non-finite parameter".into()));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(bad(format!("sigma {} outside (0, 1]", self.sigma)));
        }
        if !self.scale.iter().all(|&s| s > 0.0) {
            return Err(bad(format!("non-positive scale {:?}", self.scale.as_slice())));
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-6 {
            return Err(bad("rotation is not unit length".into()));
        }
        Ok(())
    }
}

/// Pinhole camera. Camera space is +X right, +Y down, +Z forward; depth is camera-space Z.
/// Pixel `(i, j)` has its centre at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with a symmetric field of view (radians, horizontal).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: usize,
        height: usize,
        fov_x: f64,
    ) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            right = forward.cross(&Vector3::new(1.0, 0.0, 0.0));
        }
        let right = right.normalize();
        // +Y points down in image space
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -(rotation * eye);
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Camera {
            rotation,
            translation,
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            near: 0.01,
            far: 100.0,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera-space ray direction through a pixel centre, scaled so that `z = 1`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Vector3<f64> {
        Vector3::new(
            (x as f64 + 0.5 - self.cx) / self.fx,
            (y as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.near > 0.0
            && self.near < self.far
            && self.width > 0
            && self.height > 0
            && (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm() < 1e-6;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera {self:?}")))
        }
    }

    pub fn to_json(&self) -> CameraJson {
        let r = &self.rotation;
        CameraJson {
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            near: self.near,
            far: self.far,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
            image: None,
            depth: None,
            normal: None,
        }
    }
}

/// On-disk camera description. `rotation` is row-major world-to-camera.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    /// Image file, relative to the JSON file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    /// Optional reference depth map (single-channel PFM), relative to the JSON file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    /// Optional reference normal map (three-channel PFM), relative to the JSON file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal: Option<String>,
}

impl CameraJson {
    pub fn to_camera(&self) -> Result<Camera> {
        let r = &self.rotation;
        let cam = Camera {
            rotation: Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            translation: Vector3::from(self.translation),
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

pub fn load_camera(path: impl AsRef<Path>) -> Result<Camera> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let json: CameraJson =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    json.to_camera()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub surfels: Vec<Surfel>,
    pub gaussians: Vec<Gaussian>,
    pub background: [f64; 3],
    /// Surfel opacity modulation `w`.
    pub opacity_modulation: f64,
    pub sh_degree: usize,
}

impl Scene {
    pub fn empty(sh_degree: usize) -> Self {
        Scene {
            surfels: Vec::new(),
            gaussians: Vec::new(),
            background: [0.0; 3],
            opacity_modulation: DEFAULT_OPACITY_MODULATION,
            sh_degree,
        }
    }

    pub fn sh_count(&self) -> usize {
        sh_coeff_count(self.sh_degree)
    }

    /// Checks every component invariant; the error names the offending primitive.
    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::Config(format!("SH degree {} > 3", self.sh_degree)));
        }
        if !(self.opacity_modulation > 0.0 && self.opacity_modulation.is_finite()) {
            return Err(Error::Config(format!(
                "opacity modulation must be positive, got {}",
                self.opacity_modulation
            )));
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!(
                "background {:?} outside [0, 1]",
                self.background
            )));
        }
        let k = self.sh_count();
        for (i, s) in self.surfels.iter().enumerate() {
            s.check(i)?;
            if s.sh.len() != k {
                return Err(Error::Invariant {
                    kind: "surfel",
                    index: i,
                    reason: format!("expected {k} SH coefficients, found {}", s.sh.len()),
                });
            }
        }
        for (i, g) in self.gaussians.iter().enumerate() {
            g.check(i)?;
            if g.sh.len() != k {
                return Err(Error::Invariant {
                    kind: "gaussian",
                    index: i,
                    reason: format!("expected {k} SH coefficients, found {}", g.sh.len()),
                });
            }
        }
        Ok(())
    }

    /// Renormalizes quaternions and clamps opacities/scales into their valid ranges.
    pub fn enforce_invariants(&mut self, scale_floor: f64, sigma_floor: f64) {
        for s in &mut self.surfels {
            s.rotation /= s.rotation.norm();
            s.scale.x = s.scale.x.max(scale_floor);
            s.scale.y = s.scale.y.max(scale_floor);
        }
        for g in &mut self.gaussians {
            g.rotation /= g.rotation.norm();
            g.sigma = g.sigma.clamp(sigma_floor, 1.0);
            for s in g.scale.iter_mut() {
                *s = s.max(scale_floor);
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    float: String,
    sh_degree: usize,
    surfel_count: usize,
    gaussian_count: usize,
    opacity_modulation: f64,
    background: [f64; 3],
    surfel_fields: Vec<String>,
    gaussian_fields: Vec<String>,
}

fn surfel_stride(k: usize) -> usize {
    3 + 4 + 2 + 1 + 3 * k
}

fn gaussian_stride(k: usize) -> usize {
    3 + 1 + 4 + 3 + 3 * k
}

fn push_sh(out: &mut Vec<f64>, sh: &[[f64; 3]]) {
    for c in sh {
        out.extend_from_slice(c);
    }
}

fn read_sh(vals: &[f64], k: usize) -> Vec<[f64; 3]> {
    (0..k)
        .map(|i| [vals[3 * i], vals[3 * i + 1], vals[3 * i + 2]])
        .collect()
}

/// Serializes a scene into the binary container.
pub fn scene_to_bytes(scene: &Scene) -> Vec<u8> {
    let k = scene.sh_count();
    let header = Header {
        format: "peelsplat-scene".into(),
        version: FORMAT_VERSION,
        float: "f64-le".into(),
        sh_degree: scene.sh_degree,
        surfel_count: scene.surfels.len(),
        gaussian_count: scene.gaussians.len(),
        opacity_modulation: scene.opacity_modulation,
        background: scene.background,
        surfel_fields: vec![
            "position:3".into(),
            "rotation:4".into(),
            "scale:2".into(),
            "eps:1".into(),
            format!("sh:{}", 3 * k),
        ],
        gaussian_fields: vec![
            "position:3".into(),
            "sigma:1".into(),
            "rotation:4".into(),
            "scale:3".into(),
            format!("sh:{}", 3 * k),
        ],
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut vals = Vec::with_capacity(
        scene.surfels.len() * surfel_stride(k) + scene.gaussians.len() * gaussian_stride(k),
    );
    for s in &scene.surfels {
        vals.extend_from_slice(s.position.as_slice());
        vals.extend_from_slice(s.rotation.as_slice());
        vals.extend_from_slice(s.scale.as_slice());
        vals.push(s.eps);
        push_sh(&mut vals, &s.sh);
    }
    for g in &scene.gaussians {
        vals.extend_from_slice(g.position.as_slice());
        vals.push(g.sigma);
        vals.extend_from_slice(g.rotation.as_slice());
        vals.extend_from_slice(g.scale.as_slice());
        push_sh(&mut vals, &g.sh);
    }
    let mut out = Vec::with_capacity(16 + json.len() + 8 * vals.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses the binary container; `what` names the source in error messages.
pub fn scene_from_bytes(bytes: &[u8], what: &str) -> Result<Scene> {
    let perr = |reason: String| Error::parse(what, reason);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(perr("missing scene magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| perr("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| perr(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION || header.float != "f64-le" {
        return Err(perr(format!(
            "unsupported version {} / float layout {}",
            header.version, header.float
        )));
    }
    if header.sh_degree > MAX_SH_DEGREE {
        return Err(perr(format!("SH degree {} > 3", header.sh_degree)));
    }
    let k = sh_coeff_count(header.sh_degree);
    let data = &bytes[16 + hlen..];
    let expected = 8
        * (header.surfel_count * surfel_stride(k) + header.gaussian_count * gaussian_stride(k));
    if data.len() != expected {
        return Err(perr(format!(
            "parameter blocks hold {} bytes, header implies {expected}",
            data.len()
        )));
    }
    let vals: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut surfels = Vec::with_capacity(header.surfel_count);
    let mut off = 0;
    for i in 0..header.surfel_count {
        let v = &vals[off..off + surfel_stride(k)];
        off += surfel_stride(k);
        let s = Surfel {
            position: Vector3::new(v[0], v[1], v[2]),
            rotation: unit_quat(Quat::new(v[3], v[4], v[5], v[6]), "surfel", i)?,
            scale: Vector2::new(v[7], v[8]),
            eps: v[9],
            sh: read_sh(&v[10..], k),
        };
        surfels.push(s);
    }
    let mut gaussians = Vec::with_capacity(header.gaussian_count);
    for i in 0..header.gaussian_count {
        let v = &vals[off..off + gaussian_stride(k)];
        off += gaussian_stride(k);
        gaussians.push(Gaussian {
            position: Vector3::new(v[0], v[1], v[2]),
            sigma: v[3],
            rotation: unit_quat(Quat::new(v[4], v[5], v[6], v[7]), "gaussian", i)?,
            scale: Vector3::new(v[8], v[9], v[10]),
            sh: read_sh(&v[11..], k),
        });
    }
    let scene = Scene {
        surfels,
        gaussians,
        background: header.background,
        opacity_modulation: header.opacity_modulation,
        sh_degree: header.sh_degree,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    scene_from_bytes(&bytes, &path.display().to_string())
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = scene_to_bytes(scene);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}
