//! Trains two overlapping surfels on the transmittance loss alone and reports how the
//! fully occluded (zero-transmittance) area and the surfel spacing change.
//!
//!     cargo run --release --example transmittance_loss

use peelsplat::losses::LossWeights;
use peelsplat::params::ParamClass;
use peelsplat::render;
use peelsplat::trainer::toy::{render_dataset, two_surfel};
use peelsplat::trainer::{train, Ablation, LearningRates, TrainConfig};
use peelsplat::Scene;

fn opaque_fraction(scene: &Scene, cam: &peelsplat::Camera) -> f64 {
    let r = render(scene, cam, 3);
    let t = r.stack.transmittance_map(3);
    t.iter().filter(|v| **v == 0.0).count() as f64 / t.len() as f64
}

fn main() -> peelsplat::Result<()> {
    let toy = two_surfel(64);
    let data = render_dataset(&toy.scene, &toy.cameras, 3);
    for frozen in [vec![], vec![ParamClass::Scale, ParamClass::Rotation, ParamClass::Color]] {
        let cfg = TrainConfig {
            iterations: 200,
            rgb_weight: 0.0,
            weights: LossWeights {
                lambda_s: 0.0,
                lambda_scale: 0.0,
                lambda_t: 1.0,
                ..LossWeights::default()
            },
            lr: LearningRates {
                position: 1e-3,
                position_final: 1e-3,
                ..Default::default()
            },
            frozen: frozen.clone(),
            ablation: Ablation {
                no_densify: true,
                no_split: true,
                ..Default::default()
            },
            prune_period: 0,
            ..Default::default()
        };
        let out = train(toy.scene.clone(), &data, &cfg)?;
        let cam = &toy.cameras[0];
        let d0 = (toy.scene.surfels[0].position - toy.scene.surfels[1].position).norm();
        let d1 = (out.scene.surfels[0].position - out.scene.surfels[1].position).norm();
        println!(
            "frozen {:?}: T3=0 area {:.4} -> {:.4}, spacing {:.4} -> {:.4}, scales {:?}",
            frozen,
            opaque_fraction(&toy.scene, cam),
            opaque_fraction(&out.scene, cam),
            d0,
            d1,
            out.scene.surfels.iter().map(|s| (s.scale.x, s.scale.y)).collect::<Vec<_>>()
        );
    }
    Ok(())
}
