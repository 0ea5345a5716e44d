//! Peels the overlap-rings scene and prints, along the middle row, the depth, opacity
//! and remaining transmittance of each layer. Then compares 2, 3 and 4 layers against
//! the exhaustive sorted compositor.
//!
//!     cargo run --release --example peel_layers

use peelsplat::oracle::abuffer_render_surfels;
use peelsplat::raster_surfel::peel;
use peelsplat::render;
use peelsplat::trainer::toy::overlap_rings;

fn main() {
    let toy = overlap_rings(48);
    let cam = &toy.cameras[0];
    let stack = peel(&toy.scene, cam, 4);
    let y = cam.height / 2;
    println!("  x  n  layers (surfel id: depth / alpha)                              T_final");
    for x in (0..cam.width).step_by(3) {
        let px = stack.pixel(x, y);
        let layers: Vec<String> = px
            .layers()
            .iter()
            .map(|l| format!("{}: {:.2}/{:.2}", l.surfel_id, l.depth, l.alpha))
            .collect();
        println!("{x:>3} {:>2}  {:<62} {:.3}", px.count, layers.join("  "), px.transmittance[px.count]);
    }

    let reference = abuffer_render_surfels(&toy.scene, cam).image();
    for layers in 2..=4 {
        let img = render(&toy.scene, cam, layers).image;
        println!("{layers} layers: MAE vs sorted compositing {:.3e}", img.mean_abs_diff(&reference));
    }
}
