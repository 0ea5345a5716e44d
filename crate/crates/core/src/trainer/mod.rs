//! Joint optimization of surfels and Gaussians against posed images.

pub mod adam;
pub mod maintenance;
pub mod toy;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, BackwardOptions, PixelGrads, SceneGrad};
use crate::composite::{render, Render};
use crate::dataset::{Dataset, View};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{loss_geometry, loss_rgb, loss_scale, loss_surfel, loss_transmittance, LossWeights};
use crate::margin::apply_margins;
use crate::params::{gaussian_to_flat, surfel_to_flat, ParamClass};
use crate::scene::{save_scene, Camera, Scene};

use adam::Adam;
use maintenance::{densify_gaussians, prune_surfels, split_large_gaussians, PruneThresholds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    /// Position rate at the last iteration; the rate decays exponentially towards it.
    pub position_final: f64,
    /// Multiplies both position rates, for scenes of a different extent.
    pub spatial_scale: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_final: 1.6e-6,
            spatial_scale: 1.0,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

impl LearningRates {
    pub fn at(&self, class: ParamClass, iteration: usize, total: usize) -> f64 {
        match class {
            ParamClass::Position => {
                let t = if total <= 1 { 0.0 } else { iteration as f64 / (total - 1) as f64 };
                let (a, b) = (self.position.max(1e-300).ln(), self.position_final.max(1e-300).ln());
                if self.position == 0.0 {
                    0.0
                } else {
                    self.spatial_scale * (a + t * (b - a)).exp()
                }
            }
            ParamClass::Rotation => self.rotation,
            ParamClass::Scale => self.scale,
            ParamClass::Opacity => self.opacity,
            ParamClass::Color => self.color,
        }
    }
}

/// Switches that remove one ingredient each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Stop Gaussian-weight gradients from reaching surfel geometry through transmittance.
    pub trans_grad_off: bool,
    pub no_ls: bool,
    pub no_lscale: bool,
    pub no_lt: bool,
    pub no_split: bool,
    /// Use each surfel's own margin instead of the neighbourhood median.
    pub raw_epsilon: bool,
    pub no_densify: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub layers: usize,
    pub seed: u64,
    pub lr: LearningRates,
    pub weights: LossWeights,
    /// Weight of the image loss; zero trains on the auxiliary terms alone.
    pub rgb_weight: f64,
    pub ablation: Ablation,
    /// Classes excluded from updates.
    pub frozen: Vec<ParamClass>,
    pub margin_iterations: Vec<usize>,
    pub split_period: usize,
    pub prune_period: usize,
    pub prune: PruneThresholdsConfig,
    pub densify_period: usize,
    pub densify_until: usize,
    pub densify_per_event: usize,
    pub max_gaussians: usize,
    pub scale_floor: f64,
    pub sigma_floor: f64,
    pub checkpoint_period: usize,
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneThresholdsConfig {
    pub min_coverage: u64,
    pub min_visible_ratio: f64,
}

impl Default for PruneThresholdsConfig {
    fn default() -> Self {
        let d = PruneThresholds::default();
        PruneThresholdsConfig {
            min_coverage: d.min_coverage,
            min_visible_ratio: d.min_visible_ratio,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 25_000,
            layers: 3,
            seed: 0,
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            rgb_weight: 1.0,
            ablation: Ablation::default(),
            frozen: Vec::new(),
            margin_iterations: vec![0, 4000],
            split_period: 2000,
            prune_period: 1000,
            prune: PruneThresholdsConfig::default(),
            densify_period: 500,
            densify_until: 15_000,
            densify_per_event: 128,
            max_gaussians: 100_000,
            scale_floor: 1e-4,
            sigma_floor: 1e-3,
            checkpoint_period: 1000,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.layers) {
            return Err(Error::Config(format!("layers must be 2, 3 or 4, got {}", self.layers)));
        }
        if !(self.scale_floor > 0.0 && self.sigma_floor > 0.0 && self.sigma_floor <= 1.0) {
            return Err(Error::Config("scale and opacity floors must be positive".into()));
        }
        self.weights.validate()
    }

    pub fn from_json(text: &str, what: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text).map_err(|e| Error::parse(what, e))?;
        c.validate()?;
        Ok(c)
    }
}

/// Loss terms of one iteration, unweighted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_rgb: f64,
    pub l_s: f64,
    pub l_scale: f64,
    pub l_t: f64,
    pub l_geo: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub view: usize,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "iteration,l_rgb,l_s,l_scale,l_t,l_geo,total";

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.iteration, l.l_rgb, l.l_s, l.l_scale, l.l_t, l.l_geo, l.total
        );
    }
    out
}

/// Which losses are live for one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossSwitches {
    pub rgb_weight: f64,
    pub weights: LossWeights,
    pub use_ls: bool,
    pub use_lscale: bool,
    pub use_lt: bool,
}

impl LossSwitches {
    pub fn from_config(c: &TrainConfig) -> Self {
        LossSwitches {
            rgb_weight: c.rgb_weight,
            weights: c.weights,
            use_ls: !c.ablation.no_ls && c.weights.lambda_s > 0.0,
            use_lscale: !c.ablation.no_lscale && c.weights.lambda_scale > 0.0,
            use_lt: !c.ablation.no_lt && c.weights.lambda_t > 0.0,
        }
    }
}

/// Evaluates every live loss for one rendered view. Returns the breakdown, the pixel
/// gradients for the backward pass, and the size-penalty gradient per surfel scale.
pub fn evaluate_losses(
    scene: &Scene,
    camera: &Camera,
    r: &Render,
    view: &View,
    sw: &LossSwitches,
) -> Result<(LossBreakdown, PixelGrads, Vec<[f64; 2]>)> {
    let w = &sw.weights;
    let n = camera.pixel_count();
    let mut out = LossBreakdown::default();
    let mut grads = PixelGrads::zeros(n);
    if sw.rgb_weight != 0.0 {
        let (v, g) = loss_rgb(&r.image, &view.image, w.ssim_weight)?;
        out.l_rgb = v;
        out.total += sw.rgb_weight * v;
        for i in 0..n {
            for ch in 0..3 {
                grads.color[i][ch] = sw.rgb_weight * g[3 * i + ch];
            }
        }
    }
    if sw.use_ls {
        let (v, g) = loss_surfel(&r.surfel_image(), &view.image)?;
        out.l_s = v;
        out.total += w.lambda_s * v;
        grads.surfel_color = Some((0..n).map(|i| [0, 1, 2].map(|ch| w.lambda_s * g[3 * i + ch])).collect());
    }
    let mut scale_grad = vec![[0.0; 2]; scene.surfels.len()];
    if sw.use_lscale {
        let (v, g) = loss_scale(&scene.surfels, w.per_axis_scale);
        out.l_scale = v;
        out.total += w.lambda_scale * v;
        scale_grad = g.iter().map(|g| [w.lambda_scale * g[0], w.lambda_scale * g[1]]).collect();
    }
    if sw.use_lt {
        let (v, g) = loss_transmittance(&r.stack);
        out.l_t = v;
        out.total += w.lambda_t * v;
        grads.last_transmittance = Some(g.iter().map(|g| w.lambda_t * g).collect());
    }
    if w.geometry {
        if let Some(target) = &view.geometry {
            let gl = loss_geometry(&r.surfel.depth, &r.surfel.normal, target, camera, w);
            out.l_geo = gl.value;
            out.total += gl.value;
            grads.surfel_depth = Some(gl.grad_depth);
            grads.surfel_normal = Some(gl.grad_normal);
        }
    }
    Ok((out, grads, scale_grad))
}

fn param_stats(scene: &Scene) -> String {
    let finite = |v: Vec<f64>| v.iter().all(|x| x.is_finite());
    let bad_s = scene.surfels.iter().filter(|s| !finite(surfel_to_flat(s))).count();
    let bad_g = scene.gaussians.iter().filter(|g| !finite(gaussian_to_flat(g))).count();
    format!(
        "{} surfels ({} non-finite), {} Gaussians ({} non-finite)",
        scene.surfels.len(),
        bad_s,
        scene.gaussians.len(),
        bad_g
    )
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub scene: Scene,
    pub log: Vec<LogRow>,
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:06}.psplat"))
}

/// Optimizes `scene` against `data`. Deterministic for a given seed, config and dataset.
pub fn train(mut scene: Scene, data: &Dataset, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("dataset has no views".into()));
    }
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&scene);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.iterations);
    let switches = LossSwitches::from_config(config);
    let opts = BackwardOptions {
        transmittance_grad: !config.ablation.trans_grad_off,
    };
    let cameras: Vec<&Camera> = data.views.iter().map(|v| &v.camera).collect();
    let prune_t = PruneThresholds {
        min_coverage: config.prune.min_coverage,
        min_visible_ratio: config.prune.min_visible_ratio,
    };

    for it in 0..config.iterations {
        if config.margin_iterations.contains(&it) {
            apply_margins(&mut scene, config.ablation.raw_epsilon);
        }
        if order.is_empty() {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let vi = order.pop().expect("refilled above");
        let view = &data.views[vi];
        let r = render(&scene, &view.camera, config.layers);
        let (loss, pixel_grads, scale_grad) = evaluate_losses(&scene, &view.camera, &r, view, &switches)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                view: vi,
                diagnostic: format!("{loss:?}; {}", param_stats(&scene)),
            });
        }
        let mut grad: SceneGrad = backward(&scene, &view.camera, &r, &pixel_grads, &opts)?;
        for (g, s) in grad.surfels.iter_mut().zip(&scale_grad) {
            g.scale.x += s[0];
            g.scale.y += s[1];
        }
        let lr = |c: ParamClass| {
            if config.frozen.contains(&c) {
                0.0
            } else {
                config.lr.at(c, it, config.iterations)
            }
        };
        adam.step(&mut scene, &grad, lr);
        scene.enforce_invariants(config.scale_floor, config.sigma_floor);
        log.push(LogRow {
            iteration: it,
            view: vi,
            loss,
        });

        let step = it + 1;
        if config.prune_period > 0 && step % config.prune_period == 0 {
            let removed = prune_surfels(&mut scene, Some(&mut adam), &cameras, config.layers, &prune_t);
            log::debug!("iteration {step}: pruned {removed} surfels");
        }
        if !config.ablation.no_split && config.split_period > 0 && step % config.split_period == 0 {
            let n = split_large_gaussians(&mut scene, Some(&mut adam), &mut rng);
            log::debug!("iteration {step}: split {n} Gaussians");
        }
        if !config.ablation.no_densify
            && config.densify_period > 0
            && step % config.densify_period == 0
            && step <= config.densify_until
        {
            let budget = config
                .max_gaussians
                .saturating_sub(scene.gaussians.len())
                .min(config.densify_per_event);
            let n = densify_gaussians(&mut scene, Some(&mut adam), &view.camera, &r, &view.image, budget);
            log::debug!("iteration {step}: densified {n} Gaussians");
        }
        if let Some(dir) = &config.checkpoint_dir {
            if config.checkpoint_period > 0 && step % config.checkpoint_period == 0 {
                save_scene(&scene, checkpoint_path(dir, step))?;
            }
        }
        if step % 500 == 0 {
            log::info!("iteration {step}: total loss {:.6}", loss.total);
        }
    }
    Ok(TrainOutput { scene, log })
}

/// PSNR of `scene` on every view of `data`.
pub fn evaluate_psnr(scene: &Scene, data: &Dataset, layers: usize) -> Result<Vec<f64>> {
    data.views
        .iter()
        .map(|v| {
            let img: Image = render(scene, &v.camera, layers).image;
            crate::metrics::psnr(&img, &v.image)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_rate_decays_log_linearly() {
        let lr = LearningRates::default();
        assert!((lr.at(ParamClass::Position, 0, 101) - 1.6e-4).abs() < 1e-18);
        assert!((lr.at(ParamClass::Position, 100, 101) - 1.6e-6).abs() < 1e-18);
        assert!((lr.at(ParamClass::Position, 50, 101) - 1.6e-5).abs() < 1e-15);
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let c = TrainConfig::from_json("{\"iterations\": 10, \"layers\": 2}", "cfg").unwrap();
        assert_eq!(c.iterations, 10);
        assert_eq!(c.margin_iterations, vec![0, 4000]);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(TrainConfig::from_json(&text, "cfg").unwrap(), c);
        assert!(TrainConfig::from_json("{\"layers\": 5}", "cfg").is_err());
    }

    #[test]
    fn zero_iterations_returns_the_scene_unchanged() {
        let toy = toy::two_surfel(16);
        let data = toy::render_dataset(&toy.scene, &toy.cameras, 3);
        let cfg = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let out = train(toy.scene.clone(), &data, &cfg).unwrap();
        assert_eq!(out.scene, toy.scene);
        assert!(out.log.is_empty());
    }
}
