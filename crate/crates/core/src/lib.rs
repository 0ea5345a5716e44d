//! Depth-peeled surfels with semi-transparent rims, composited with sort-free Gaussians.

pub mod autodiff;
pub mod cli;
pub mod composite;
pub mod dataset;
pub mod error;
pub mod image;
pub mod losses;
pub mod margin;
pub mod math;
pub mod metrics;
pub mod oracle;
pub mod params;
pub mod raster_surfel;
pub mod scene;
pub mod splat_gauss;
pub mod trainer;
pub mod verify;

pub use autodiff::{backward, BackwardOptions, PixelGrads, SceneGrad};
pub use composite::{render, render_with_splat_stack, Render};
pub use error::{Error, Result};
pub use image::Image;
pub use scene::{Camera, Gaussian, Scene, Surfel};
