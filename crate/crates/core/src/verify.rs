//! Self-checks runnable from the command line: peeling against the A-buffer, order
//! independence of the Gaussian pass, analytic against numeric gradients, and the
//! margin leakage construction.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::BackwardOptions;
use crate::composite::render;
use crate::margin::apply_margins;
use crate::oracle::{abuffer_render_surfels, check_scene_gradients, micro_scene, random_scene, GradReport, ProbeLoss};
use crate::raster_surfel::peel;
use crate::scene::{Camera, Scene};
use crate::trainer::toy::{bundled, occluder_box, BUNDLED};

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub lines: Vec<String>,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        SuiteReport {
            name,
            passed: true,
            lines: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.passed &= ok;
        self.lines.push(format!("{} {line}", if ok { "ok  " } else { "FAIL" }));
    }
}

/// How much work each suite does.
#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub peel_scenes: usize,
    pub peel_surfels: usize,
    pub order_scenes: usize,
    pub permutations: usize,
    pub grad_scenes: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            peel_scenes: 50,
            peel_surfels: 500,
            order_scenes: 5,
            permutations: 20,
            grad_scenes: 20,
        }
    }
}

/// Number of pixels whose peeled layers differ, in any field, from the first `layers`
/// fragments of the sorted A-buffer.
pub fn peel_mismatches(scene: &Scene, camera: &Camera, layers: usize) -> usize {
    let stack = peel(scene, camera, layers);
    let ab = abuffer_render_surfels(scene, camera);
    stack
        .pixels
        .iter()
        .zip(&ab.fragments)
        .filter(|(px, frags)| {
            let n = frags.len().min(layers);
            px.count != n || px.layers() != &frags[..n]
        })
        .count()
}

/// Largest deviation from 1 of the explicitly summed surfel compositing weights.
pub fn surfel_weight_error(scene: &Scene, camera: &Camera, layers: usize) -> f64 {
    let stack = peel(scene, camera, layers);
    stack
        .pixels
        .iter()
        .map(|px| {
            let mut t = 1.0;
            let mut w = 0.0;
            for l in px.layers() {
                w += l.alpha * t;
                t *= 1.0 - l.alpha;
            }
            (w + t - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest relative image difference between the canonical Gaussian order and
/// `permutations` shuffles of it.
pub fn order_deviation(scene: &Scene, camera: &Camera, permutations: usize, seed: u64) -> f64 {
    let base = render(scene, camera, 3).image;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..permutations {
        let mut s = scene.clone();
        s.gaussians.shuffle(&mut rng);
        let img = render(&s, camera, 3).image;
        for (a, b) in base.data.iter().zip(&img.data) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-12));
        }
    }
    worst
}

pub fn verify_peel(o: &VerifyOptions) -> SuiteReport {
    let mut rep = SuiteReport::new("peel");
    let t = Instant::now();
    let mut bad_scenes = 0;
    let mut worst_w: f64 = 0.0;
    for i in 0..o.peel_scenes {
        let seed = o.seed.wrapping_add(i as u64);
        let n = 1 + (seed as usize * 7919) % o.peel_surfels.max(1);
        let (scene, cam) = random_scene(seed, n, 0, 64);
        if peel_mismatches(&scene, &cam, 3) > 0 {
            bad_scenes += 1;
        }
        worst_w = worst_w.max(surfel_weight_error(&scene, &cam, 3));
    }
    rep.check(
        bad_scenes == 0,
        format!(
            "peeled layers equal sorted A-buffer on {}/{} random scenes ({:.1}s)",
            o.peel_scenes - bad_scenes,
            o.peel_scenes,
            t.elapsed().as_secs_f64()
        ),
    );
    rep.check(worst_w <= 1e-12, format!("surfel weights sum to 1: max error {worst_w:.2e}"));
    for name in BUNDLED {
        let toy = bundled(name, 48, o.seed).expect("bundled name");
        let bad: usize = toy.cameras.iter().map(|c| peel_mismatches(&toy.scene, c, 3)).sum();
        rep.check(bad == 0, format!("{name}: {bad} mismatching pixels"));
    }
    rep
}

pub fn verify_order(o: &VerifyOptions) -> SuiteReport {
    let mut rep = SuiteReport::new("order");
    for i in 0..o.order_scenes {
        let seed = o.seed.wrapping_add(1000 + i as u64);
        let (scene, cam) = random_scene(seed, 40, 200, 64);
        let dev = order_deviation(&scene, &cam, o.permutations, seed);
        rep.check(
            dev <= 1e-6,
            format!("scene {seed}: {} permutations, max relative deviation {dev:.2e}", o.permutations),
        );
    }
    rep
}

/// Analytic against numeric gradients on `scenes` micro-scenes, with both settings of
/// the transmittance path.
pub fn gradient_report(scenes: usize, seed: u64) -> (GradReport, GradReport) {
    let mut on = GradReport::default();
    let mut off = GradReport::default();
    for i in 0..scenes {
        let s = seed.wrapping_add(i as u64);
        let sh = (i % 3) as usize;
        let (scene, cam) = micro_scene(s, 3, 5, sh);
        let layers = 2 + i % 3;
        let probe = ProbeLoss::random(&cam, layers, s, i % 2 == 0);
        on.merge(&check_scene_gradients(&scene, &cam, &probe, &BackwardOptions::default()));
        if i % 4 == 0 {
            let opts = BackwardOptions {
                transmittance_grad: false,
            };
            off.merge(&check_scene_gradients(&scene, &cam, &probe, &opts));
        }
    }
    (on, off)
}

pub fn verify_grad(o: &VerifyOptions) -> SuiteReport {
    let mut rep = SuiteReport::new("grad");
    let t = Instant::now();
    let (on, off) = gradient_report(o.grad_scenes, o.seed);
    for (label, r) in [("", &on), ("detached t_s ", &off)] {
        for (class, c) in &r.classes {
            rep.check(
                c.failures.is_empty() && c.checked > 0,
                format!(
                    "{label}{:<9} max rel error {:.2e} ({} checked, {} near a boundary, {} failed)",
                    class.name(),
                    c.max_error,
                    c.checked,
                    c.skipped,
                    c.failures.len()
                ),
            );
        }
    }
    rep.lines.push(format!("     {} micro-scenes in {:.1}s", o.grad_scenes, t.elapsed().as_secs_f64()));
    rep
}

/// Total Gaussian weight landing on the image of the occluder construction.
pub fn leaked_weight(raw_margins: bool) -> f64 {
    let toy = occluder_box(48, 0.5);
    let mut scene = toy.scene;
    apply_margins(&mut scene, raw_margins);
    render(&scene, &toy.cameras[0], 3).accum.weight.iter().sum()
}

pub fn verify_leakage(_o: &VerifyOptions) -> SuiteReport {
    let mut rep = SuiteReport::new("leakage");
    let raw = leaked_weight(true);
    let median = leaked_weight(false);
    rep.check(raw > 0.0, format!("raw margins: occluded Gaussian weight {raw:.4e} (> 0)"));
    rep.check(median == 0.0, format!("median margins: occluded Gaussian weight {median:.4e} (= 0)"));
    rep
}

pub const SUITES: [&str; 4] = ["peel", "order", "grad", "leakage"];

pub fn run_suite(name: &str, o: &VerifyOptions) -> Option<SuiteReport> {
    Some(match name {
        "peel" => verify_peel(o),
        "order" => verify_order(o),
        "grad" => verify_grad(o),
        "leakage" => verify_leakage(o),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        let o = VerifyOptions {
            peel_scenes: 2,
            peel_surfels: 60,
            order_scenes: 1,
            permutations: 3,
            grad_scenes: 1,
            ..Default::default()
        };
        for name in SUITES {
            let r = run_suite(name, &o).unwrap();
            assert!(r.passed, "{name}: {:#?}", r.lines);
        }
        assert!(run_suite("nope", &o).is_none());
    }
}
