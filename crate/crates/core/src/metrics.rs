//! Image quality metrics, plus the windowed SSIM used both for evaluation and as a loss.

use rayon::prelude::*;

use crate::error::Result;
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// `10 log10(1 / MSE)` for images in `[0, 1]`; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Same-size separable convolution with zero padding. The window is symmetric, so this
/// is also its own adjoint.
pub fn filter(plane: &[f64], width: usize, height: usize) -> Vec<f64> {
    let w = gaussian_window();
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    tmp.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in -r..=r {
                let xx = x as isize + k;
                if xx >= 0 && (xx as usize) < width {
                    s += w[(k + r) as usize] * plane[y * width + xx as usize];
                }
            }
            *out = s;
        }
    });
    let mut out = vec![0.0; plane.len()];
    out.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in -r..=r {
                let yy = y as isize + k;
                if yy >= 0 && (yy as usize) < height {
                    s += w[(k + r) as usize] * tmp[yy as usize * width + x];
                }
            }
            *o = s;
        }
    });
    out
}

fn channel(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(img.channels).copied().collect()
}

/// Mean SSIM over pixels and channels, and optionally its gradient w.r.t. `x`.
pub fn ssim_with_grad(x: &Image, y: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    x.same_shape(y)?;
    let (w, h, nc) = (x.width, x.height, x.channels);
    let n = (w * h * nc).max(1) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; x.data.len()]);
    for ch in 0..nc {
        let xs = channel(x, ch);
        let ys = channel(y, ch);
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_x = filter(&xs, w, h);
        let mu_y = filter(&ys, w, h);
        let m_xx = filter(&sq(&xs, &xs), w, h);
        let m_yy = filter(&sq(&ys, &ys), w, h);
        let m_xy = filter(&sq(&xs, &ys), w, h);
        let mut g_mu = vec![0.0; w * h];
        let mut g_xx = vec![0.0; w * h];
        let mut g_xy = vec![0.0; w * h];
        for i in 0..w * h {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let a = 2.0 * mx * my + SSIM_C1;
            let b = 2.0 * (m_xy[i] - mx * my) + SSIM_C2;
            let c = mx * mx + my * my + SSIM_C1;
            let d = (m_xx[i] - mx * mx) + (m_yy[i] - my * my) + SSIM_C2;
            let map = a * b / (c * d);
            total += map;
            if grad.is_some() {
                // d map / d(mu_x, E[x^2], E[xy]) with the mean taken over all samples
                let s = map / n;
                g_mu[i] = s * (2.0 * my / a - 2.0 * my / b - 2.0 * mx / c + 2.0 * mx / d);
                g_xx[i] = -s / d;
                g_xy[i] = 2.0 * s / b;
            }
        }
        if let Some(g) = grad.as_mut() {
            let f_mu = filter(&g_mu, w, h);
            let f_xx = filter(&g_xx, w, h);
            let f_xy = filter(&g_xy, w, h);
            for i in 0..w * h {
                g[i * nc + ch] = f_mu[i] + 2.0 * xs[i] * f_xx[i] + ys[i] * f_xy[i];
            }
        }
    }
    Ok((total / n, grad))
}

/// Per-sample SSIM values, laid out like the image data.
pub fn ssim_map(x: &Image, y: &Image) -> Result<Vec<f64>> {
    x.same_shape(y)?;
    let (w, h, nc) = (x.width, x.height, x.channels);
    let mut out = vec![0.0; x.data.len()];
    for ch in 0..nc {
        let xs = channel(x, ch);
        let ys = channel(y, ch);
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_x = filter(&xs, w, h);
        let mu_y = filter(&ys, w, h);
        let m_xx = filter(&sq(&xs, &xs), w, h);
        let m_yy = filter(&sq(&ys, &ys), w, h);
        let m_xy = filter(&sq(&xs, &ys), w, h);
        for i in 0..w * h {
            let (mx, my) = (mu_x[i], mu_y[i]);
            out[i * nc + ch] = (2.0 * mx * my + SSIM_C1) * (2.0 * (m_xy[i] - mx * my) + SSIM_C2)
                / ((mx * mx + my * my + SSIM_C1) * (m_xx[i] - mx * mx + m_yy[i] - my * my + SSIM_C2));
        }
    }
    Ok(out)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_with_grad(a, b, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.random::<f64>()).collect();
        Image {
            width: w,
            height: h,
            channels: 3,
            data,
        }
    }

    /// Direct 2D window sums, written independently of the separable filter.
    fn reference_ssim(a: &Image, b: &Image) -> f64 {
        let g1 = gaussian_window();
        let r = 5isize;
        let mut total = 0.0;
        for ch in 0..3 {
            for y in 0..a.height as isize {
                for x in 0..a.width as isize {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (px, py) = (x + dx, y + dy);
                            if px < 0 || py < 0 || px >= a.width as isize || py >= a.height as isize {
                                continue;
                            }
                            let wt = g1[(dx + r) as usize] * g1[(dy + r) as usize];
                            let p = a.pixel(px as usize, py as usize)[ch];
                            let q = b.pixel(px as usize, py as usize)[ch];
                            mx += wt * p;
                            my += wt * q;
                            xx += wt * p * p;
                            yy += wt * q * q;
                            xy += wt * p * q;
                        }
                    }
                    let num = (2.0 * mx * my + SSIM_C1) * (2.0 * (xy - mx * my) + SSIM_C2);
                    let den = (mx * mx + my * my + SSIM_C1) * (xx - mx * mx + yy - my * my + SSIM_C2);
                    total += num / den;
                }
            }
        }
        total / (a.width * a.height * 3) as f64
    }

    #[test]
    fn psnr_values() {
        let a = Image::filled(4, 4, &[0.0; 3]);
        let b = Image::filled(4, 4, &[0.1; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        // 2x2 gray: errors 0, 0.1, 0.2, 0.3 -> MSE 0.035
        let c = Image::from_gray(2, 2, vec![0.0; 4]);
        let d = Image::from_gray(2, 2, vec![0.0, 0.1, 0.2, 0.3]);
        let want = 10.0 * (1.0f64 / 0.035).log10();
        assert!((psnr(&c, &d).unwrap() - want).abs() < 1e-12);
        assert_eq!(psnr(&c, &d).unwrap(), psnr(&d, &c).unwrap());
    }

    #[test]
    fn ssim_identity_negation_and_reference() {
        let a = random_image(1, 13, 9);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = random_image(2, 13, 9);
        assert!((ssim(&a, &b).unwrap() - reference_ssim(&a, &b)).abs() < 1e-6);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        // zero-mean checkerboard against its negative. Windows touching the zero-padded
        // border are not zero-mean, so only the interior is exactly anticorrelated
        let z = Image {
            width: 32,
            height: 32,
            channels: 1,
            data: (0..1024).map(|i| if (i % 32 + i / 32) % 2 == 0 { 0.5 } else { -0.5 }).collect(),
        };
        let mut neg = z.clone();
        neg.data.iter_mut().for_each(|v| *v = -*v);
        let map = ssim_map(&z, &neg).unwrap();
        for y in 5..27 {
            for x in 5..27 {
                // variance 0.25 each: (C2 - 0.5) / (C2 + 0.5), i.e. -1 up to the stabilizer
                let want = (SSIM_C2 - 0.5) / (SSIM_C2 + 0.5);
                assert!((map[y * 32 + x] - want).abs() < 1e-6, "{}", map[y * 32 + x]);
            }
        }
        let mean = map.iter().sum::<f64>() / 1024.0;
        assert!((ssim(&z, &neg).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_fd() {
        let a = random_image(3, 12, 12);
        let b = random_image(4, 12, 12);
        let (_, g) = ssim_with_grad(&a, &b, true).unwrap();
        let g = g.unwrap();
        for &i in &[0usize, 7, 100, 217, 431] {
            let h = 1e-6;
            let mut p = a.clone();
            p.data[i] += h;
            let mut m = a.clone();
            m.data[i] -= h;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }
}
