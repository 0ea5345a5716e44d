//! Flat per-primitive parameter layouts.
//!
//! Surfel: `position[3] rotation[4] scale[2] sh[3K]`.
//! Gaussian: `position[3] sigma[1] rotation[4] scale[3] sh[3K]`.

use std::fmt;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GaussianGrad, SceneGrad, SurfelGrad};
use crate::math::Quat;
use crate::scene::{Gaussian, Scene, Surfel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamClass {
    Position,
    Rotation,
    Scale,
    Opacity,
    Color,
}

impl ParamClass {
    pub const ALL: [ParamClass; 5] = [
        ParamClass::Position,
        ParamClass::Rotation,
        ParamClass::Scale,
        ParamClass::Opacity,
        ParamClass::Color,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Position => "position",
            ParamClass::Rotation => "rotation",
            ParamClass::Scale => "scale",
            ParamClass::Opacity => "opacity",
            ParamClass::Color => "color",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrimitiveKind {
    Surfel,
    Gaussian,
}

/// Addresses one scalar parameter of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamHandle {
    pub kind: PrimitiveKind,
    pub index: usize,
    pub offset: usize,
}

impl fmt::Display for ParamHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            PrimitiveKind::Surfel => "surfel",
            PrimitiveKind::Gaussian => "gaussian",
        };
        write!(f, "{k}[{}].{}", self.index, self.offset)
    }
}

pub fn surfel_len(sh: usize) -> usize {
    9 + 3 * sh
}

pub fn gaussian_len(sh: usize) -> usize {
    11 + 3 * sh
}

pub fn surfel_class(offset: usize) -> ParamClass {
    match offset {
        0..=2 => ParamClass::Position,
        3..=6 => ParamClass::Rotation,
        7..=8 => ParamClass::Scale,
        _ => ParamClass::Color,
    }
}

pub fn gaussian_class(offset: usize) -> ParamClass {
    match offset {
        0..=2 => ParamClass::Position,
        3 => ParamClass::Opacity,
        4..=7 => ParamClass::Rotation,
        8..=10 => ParamClass::Scale,
        _ => ParamClass::Color,
    }
}

pub fn param_class(h: &ParamHandle) -> ParamClass {
    match h.kind {
        PrimitiveKind::Surfel => surfel_class(h.offset),
        PrimitiveKind::Gaussian => gaussian_class(h.offset),
    }
}

fn push_sh(out: &mut Vec<f64>, sh: &[[f64; 3]]) {
    for c in sh {
        out.extend_from_slice(c);
    }
}

fn read_sh(sh: &mut [[f64; 3]], v: &[f64]) {
    for (k, c) in sh.iter_mut().enumerate() {
        c.copy_from_slice(&v[3 * k..3 * k + 3]);
    }
}

pub fn surfel_to_flat(s: &Surfel) -> Vec<f64> {
    let mut v = Vec::with_capacity(surfel_len(s.sh.len()));
    v.extend_from_slice(s.position.as_slice());
    v.extend_from_slice(s.rotation.as_slice());
    v.extend_from_slice(s.scale.as_slice());
    push_sh(&mut v, &s.sh);
    v
}

pub fn surfel_from_flat(s: &mut Surfel, v: &[f64]) {
    s.position = Vector3::new(v[0], v[1], v[2]);
    s.rotation = Quat::new(v[3], v[4], v[5], v[6]);
    s.scale = Vector2::new(v[7], v[8]);
    read_sh(&mut s.sh, &v[9..]);
}

pub fn gaussian_to_flat(g: &Gaussian) -> Vec<f64> {
    let mut v = Vec::with_capacity(gaussian_len(g.sh.len()));
    v.extend_from_slice(g.position.as_slice());
    v.push(g.sigma);
    v.extend_from_slice(g.rotation.as_slice());
    v.extend_from_slice(g.scale.as_slice());
    push_sh(&mut v, &g.sh);
    v
}

pub fn gaussian_from_flat(g: &mut Gaussian, v: &[f64]) {
    g.position = Vector3::new(v[0], v[1], v[2]);
    g.sigma = v[3];
    g.rotation = Quat::new(v[4], v[5], v[6], v[7]);
    g.scale = Vector3::new(v[8], v[9], v[10]);
    read_sh(&mut g.sh, &v[11..]);
}

pub fn surfel_grad_to_flat(g: &SurfelGrad) -> Vec<f64> {
    let mut v = Vec::with_capacity(surfel_len(g.sh.len()));
    v.extend_from_slice(g.position.as_slice());
    v.extend_from_slice(g.rotation.as_slice());
    v.extend_from_slice(g.scale.as_slice());
    push_sh(&mut v, &g.sh);
    v
}

pub fn gaussian_grad_to_flat(g: &GaussianGrad) -> Vec<f64> {
    let mut v = Vec::with_capacity(gaussian_len(g.sh.len()));
    v.extend_from_slice(g.position.as_slice());
    v.push(g.sigma);
    v.extend_from_slice(g.rotation.as_slice());
    v.extend_from_slice(g.scale.as_slice());
    push_sh(&mut v, &g.sh);
    v
}

/// Every scalar parameter of the scene, surfels first.
pub fn all_handles(scene: &Scene) -> Vec<ParamHandle> {
    let k = scene.sh_count();
    let mut out = Vec::new();
    for i in 0..scene.surfels.len() {
        for o in 0..surfel_len(k) {
            out.push(ParamHandle {
                kind: PrimitiveKind::Surfel,
                index: i,
                offset: o,
            });
        }
    }
    for i in 0..scene.gaussians.len() {
        for o in 0..gaussian_len(k) {
            out.push(ParamHandle {
                kind: PrimitiveKind::Gaussian,
                index: i,
                offset: o,
            });
        }
    }
    out
}

pub fn get_param(scene: &Scene, h: &ParamHandle) -> f64 {
    match h.kind {
        PrimitiveKind::Surfel => surfel_to_flat(&scene.surfels[h.index])[h.offset],
        PrimitiveKind::Gaussian => gaussian_to_flat(&scene.gaussians[h.index])[h.offset],
    }
}

pub fn set_param(scene: &mut Scene, h: &ParamHandle, value: f64) {
    match h.kind {
        PrimitiveKind::Surfel => {
            let s = &mut scene.surfels[h.index];
            let mut v = surfel_to_flat(s);
            v[h.offset] = value;
            surfel_from_flat(s, &v);
        }
        PrimitiveKind::Gaussian => {
            let g = &mut scene.gaussians[h.index];
            let mut v = gaussian_to_flat(g);
            v[h.offset] = value;
            gaussian_from_flat(g, &v);
        }
    }
}

pub fn get_grad(grad: &SceneGrad, h: &ParamHandle) -> f64 {
    match h.kind {
        PrimitiveKind::Surfel => surfel_grad_to_flat(&grad.surfels[h.index])[h.offset],
        PrimitiveKind::Gaussian => gaussian_grad_to_flat(&grad.gaussians[h.index])[h.offset],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip_and_classes() {
        let mut s = Surfel::new(
            Vector3::new(1.0, 2.0, 3.0),
            Quat::new(1.0, 0.0, 0.0, 0.0),
            Vector2::new(0.1, 0.2),
            vec![[0.5, 0.6, 0.7]; 4],
        )
        .unwrap();
        let v = surfel_to_flat(&s);
        assert_eq!(v.len(), surfel_len(4));
        let before = s.clone();
        surfel_from_flat(&mut s, &v);
        assert_eq!(s, before);
        assert_eq!(surfel_class(8), ParamClass::Scale);
        assert_eq!(surfel_class(9), ParamClass::Color);
        assert_eq!(gaussian_class(3), ParamClass::Opacity);
        assert_eq!(gaussian_class(10), ParamClass::Scale);
    }
}
