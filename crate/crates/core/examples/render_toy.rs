//! Renders every bundled toy scene from its first camera and writes 8-bit PPMs.
//!
//!     cargo run --release --example render_toy [out_dir] [size]

use std::path::PathBuf;

use peelsplat::image::write_image;
use peelsplat::render;
use peelsplat::trainer::toy::{bundled, BUNDLED};

fn main() -> peelsplat::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "toy_renders".into()));
    let size = args.next().and_then(|s| s.parse().ok()).unwrap_or(128);
    std::fs::create_dir_all(&dir).map_err(|source| peelsplat::Error::Io {
        path: dir.clone(),
        source,
    })?;
    for name in BUNDLED {
        let toy = bundled(name, size, 0).expect("bundled toy");
        let t = std::time::Instant::now();
        let r = render(&toy.scene, &toy.cameras[0], 3);
        let ms = t.elapsed().as_secs_f64() * 1e3;
        let path = dir.join(format!("{name}.ppm"));
        write_image(&r.image, &path)?;
        println!(
            "{name:<14} {} surfels, {} Gaussians, {ms:.1} ms -> {}",
            toy.scene.surfels.len(),
            toy.scene.gaussians.len(),
            path.display()
        );
    }
    Ok(())
}
