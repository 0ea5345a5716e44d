//! Bias-corrected moment optimizer over the flat per-primitive layouts.

use crate::autodiff::SceneGrad;
use crate::params::{
    gaussian_class, gaussian_from_flat, gaussian_grad_to_flat, gaussian_len, gaussian_to_flat, surfel_class,
    surfel_from_flat, surfel_grad_to_flat, surfel_len, surfel_to_flat, ParamClass,
};
use crate::scene::Scene;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// Moments for one primitive. Each primitive counts its own steps, so a freshly spawned
/// one starts with full bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u32,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    fn step(&mut self, values: &mut [f64], grad: &[f64], lr: impl Fn(usize) -> f64) {
        self.steps += 1;
        let c1 = 1.0 - BETA1.powi(self.steps as i32);
        let c2 = 1.0 - BETA2.powi(self.steps as i32);
        for o in 0..values.len() {
            let g = grad[o];
            self.m[o] = BETA1 * self.m[o] + (1.0 - BETA1) * g;
            self.v[o] = BETA2 * self.v[o] + (1.0 - BETA2) * g * g;
            let rate = lr(o);
            if rate != 0.0 {
                values[o] -= rate * (self.m[o] / c1) / ((self.v[o] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub surfels: Vec<Moments>,
    pub gaussians: Vec<Moments>,
}

impl Adam {
    pub fn new(scene: &Scene) -> Self {
        let k = scene.sh_count();
        Adam {
            surfels: (0..scene.surfels.len()).map(|_| Moments::new(surfel_len(k))).collect(),
            gaussians: (0..scene.gaussians.len()).map(|_| Moments::new(gaussian_len(k))).collect(),
        }
    }

    /// One update; `lr` maps a parameter class to its current rate (0 freezes it).
    pub fn step(&mut self, scene: &mut Scene, grad: &SceneGrad, lr: impl Fn(ParamClass) -> f64) {
        for ((s, g), st) in scene.surfels.iter_mut().zip(&grad.surfels).zip(&mut self.surfels) {
            let mut v = surfel_to_flat(s);
            st.step(&mut v, &surfel_grad_to_flat(g), |o| lr(surfel_class(o)));
            surfel_from_flat(s, &v);
        }
        for ((p, g), st) in scene.gaussians.iter_mut().zip(&grad.gaussians).zip(&mut self.gaussians) {
            let mut v = gaussian_to_flat(p);
            st.step(&mut v, &gaussian_grad_to_flat(g), |o| lr(gaussian_class(o)));
            gaussian_from_flat(p, &v);
        }
    }

    pub fn retain_surfels(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.surfels.retain(|_| *it.next().unwrap());
    }
}
