//! Final image assembly and the full forward pass.

use crate::image::Image;
use crate::raster_surfel::{
    blend_surfels, peel_views, prepare_surfels, Kernel, PeelStack, SurfelBlend, SurfelView,
};
use crate::scene::{Camera, Scene};
use crate::splat_gauss::{accumulate_splats, project_gaussians, AccumBuffers, GaussianSplat};

/// `C = (C_s + C_G) / (W_s + W_G)` per pixel.
///
/// `W_s` is one up to rounding and `W_G >= 0`, so the denominator never drops below one.
pub fn composite(width: usize, height: usize, surfel_color: &[[f64; 3]], surfel_weight: &[f64], accum: &AccumBuffers) -> Image {
    assert_eq!(surfel_color.len(), width * height);
    assert_eq!(accum.weight.len(), width * height);
    let mut img = Image::new(width, height, 3);
    for i in 0..width * height {
        let den = surfel_weight[i] + accum.weight[i];
        assert!(den >= 1.0 - 1e-9, "compositing denominator {den} < 1 at pixel {i}");
        for ch in 0..3 {
            img.data[3 * i + ch] = (surfel_color[i][ch] + accum.color[i][ch]) / den;
        }
    }
    img
}

/// Everything the forward pass produced for one view. This doubles as the gradient tape:
/// the backward pass replays the same per-pixel decisions from these intermediates.
#[derive(Debug, Clone)]
pub struct Render {
    /// Unclamped final image.
    pub image: Image,
    pub stack: PeelStack,
    pub surfel: SurfelBlend,
    pub accum: AccumBuffers,
    pub background: [f64; 3],
    pub(crate) surfel_views: Vec<SurfelView>,
    pub(crate) splats: Vec<GaussianSplat>,
    pub(crate) surfel_eps: Vec<f64>,
    /// Stack the splat stage read transmittance and culling from, when it differs from `stack`.
    pub(crate) splat_stack: Option<PeelStack>,
}

impl Render {
    pub fn layers(&self) -> usize {
        self.stack.layers
    }

    /// Surfel-only colour `C_s` as an image.
    pub fn surfel_image(&self) -> Image {
        Image::from_rgb(self.stack.width, self.stack.height, &self.surfel.color)
    }

    pub(crate) fn splat_stack(&self) -> &PeelStack {
        self.splat_stack.as_ref().unwrap_or(&self.stack)
    }
}

/// Peel, blend, splat and composite one view.
pub fn render(scene: &Scene, camera: &Camera, layers: usize) -> Render {
    render_with_splat_stack(scene, camera, layers, None)
}

/// Like [`render`], but the Gaussian stage reads transmittance and culling depths from
/// `splat_stack` instead of this render's own peel. Used to evaluate the loss with the
/// transmittance held fixed.
pub fn render_with_splat_stack(
    scene: &Scene,
    camera: &Camera,
    layers: usize,
    splat_stack: Option<&PeelStack>,
) -> Render {
    let kernel = Kernel::new(scene.opacity_modulation);
    let surfel_views = prepare_surfels(scene, camera);
    let stack = peel_views(&surfel_views, camera, &kernel, layers);
    let surfel = blend_surfels(&stack, &scene.background);
    let splats = project_gaussians(scene, camera);
    let surfel_eps: Vec<f64> = scene.surfels.iter().map(|s| s.eps).collect();
    let accum = accumulate_splats(&splats, camera, splat_stack.unwrap_or(&stack), &surfel_eps);
    let image = composite(camera.width, camera.height, &surfel.color, &surfel.weight, &accum);
    Render {
        image,
        stack,
        surfel,
        accum,
        background: scene.background,
        surfel_views,
        splats,
        surfel_eps,
        splat_stack: splat_stack.cloned(),
    }
}
