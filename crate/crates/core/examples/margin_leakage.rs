//! The margin leak: a wall whose own depth margin is larger than the gap to a Gaussian
//! hidden behind it. With raw per-surfel margins the Gaussian shows through; with the
//! neighbourhood median it does not.
//!
//!     cargo run --release --example margin_leakage

use peelsplat::margin::{apply_margins, initial_margin};
use peelsplat::render;
use peelsplat::trainer::toy::occluder_box;

fn main() {
    for gap in [0.1, 0.3, 0.5, 1.0, 2.0] {
        let toy = occluder_box(48, gap);
        let cam = &toy.cameras[0];
        let wall_raw = initial_margin(&toy.scene.surfels[0]);
        let mut line = format!("gap {gap:.1} (wall raw margin {wall_raw:.2}):");
        for raw in [true, false] {
            let mut scene = toy.scene.clone();
            apply_margins(&mut scene, raw);
            let r = render(&scene, cam, 3);
            let weight: f64 = r.accum.weight.iter().sum();
            let lit = r.accum.weight.iter().filter(|w| **w > 0.0).count();
            line += &format!(
                "  {} margin {:.3}: weight {weight:.3e} over {lit} px",
                if raw { "raw" } else { "median" },
                scene.surfels[0].eps
            );
        }
        println!("{line}");
    }
}
