//! Training objective: `(1 − λ_ssim)·L1 + λ_ssim·(1 − SSIM) + λ_vol·L_vol`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;
use crate::render::Splat;
use crate::ssim::ssim_with_grad;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_vol: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ssim: 0.2,
            lambda_vol: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    /// `1 − SSIM`.
    pub l_ssim: f64,
    pub l_vol: f64,
}

/// Mean absolute error and its gradient with respect to `x`.
pub fn l1_with_grad(x: &Image, y: &Image) -> Result<(f64, Image)> {
    x.same_shape(y)?;
    let n = x.data.len().max(1) as f64;
    let mut grad = Image::new(x.width, x.height, x.channels);
    let mut sum = 0.0;
    for ((g, a), b) in grad.data.iter_mut().zip(&x.data).zip(&y.data) {
        let d = a - b;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

/// Mean over `splats` of the product of their scales, with the gradient
/// with respect to each splat's scale.
pub fn volume_with_grad(splats: &[Splat]) -> (f64, Vec<Vector3<f64>>) {
    if splats.is_empty() {
        return (0.0, Vec::new());
    }
    let n = splats.len() as f64;
    let mut sum = 0.0;
    let grads = splats
        .iter()
        .map(|s| {
            let v = s.gaussian.scale;
            sum += v.x * v.y * v.z;
            Vector3::new(v.y * v.z, v.x * v.z, v.x * v.y) / n
        })
        .collect();
    (sum / n, grads)
}

/// Image terms of the objective with `∂L/∂render`. `l_vol` is left at zero.
pub fn image_loss(render: &Image, gt: &Image, w: &LossWeights) -> Result<(LossTerms, Image)> {
    let (l1, g1) = l1_with_grad(render, gt)?;
    let (s, gs) = ssim_with_grad(render, gt)?;
    let mut grad = g1;
    for (g, d) in grad.data.iter_mut().zip(&gs.data) {
        *g = (1.0 - w.lambda_ssim) * *g - w.lambda_ssim * d;
    }
    let l_ssim = 1.0 - s;
    Ok((
        LossTerms {
            total: (1.0 - w.lambda_ssim) * l1 + w.lambda_ssim * l_ssim,
            l1,
            l_ssim,
            l_vol: 0.0,
        },
        grad,
    ))
}

/// Full objective for a rendered frame. Returns the terms, `∂L/∂render` and
/// `∂L/∂scale` per splat.
pub fn frame_loss(
    render: &Image,
    gt: &Image,
    splats: &[Splat],
    w: &LossWeights,
) -> Result<(LossTerms, Image, Vec<Vector3<f64>>)> {
    let (mut terms, grad) = image_loss(render, gt, w)?;
    let (vol, mut dvol) = volume_with_grad(splats);
    terms.l_vol = vol;
    terms.total += w.lambda_vol * vol;
    dvol.iter_mut().for_each(|g| *g *= w.lambda_vol);
    Ok((terms, grad, dvol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(8, 8, 3, (0..192).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn identity_gives_zero_image_terms() {
        let a = random_image(1);
        let (t, _) = image_loss(&a, &a, &LossWeights::default()).unwrap();
        assert_eq!(t.l1, 0.0);
        assert!(t.l_ssim.abs() < 1e-12);
    }

    #[test]
    fn constant_offset_l1() {
        let a = Image::filled(8, 8, &[0.3, 0.3, 0.3]);
        let b = Image::filled(8, 8, &[0.4, 0.4, 0.4]);
        let (l1, _) = l1_with_grad(&a, &b).unwrap();
        assert!((l1 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn total_decomposes() {
        let (a, b) = (random_image(2), random_image(3));
        let w = LossWeights::default();
        let (t, _) = image_loss(&a, &b, &w).unwrap();
        assert_eq!(t.total, (1.0 - w.lambda_ssim) * t.l1 + w.lambda_ssim * t.l_ssim);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = (random_image(4), random_image(5));
        let w = LossWeights::default();
        let (_, g) = image_loss(&x, &y, &w).unwrap();
        let eps = 1e-5;
        for i in 0..x.data.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[i] += eps;
            m.data[i] -= eps;
            let fd = (image_loss(&p, &y, &w).unwrap().0.total - image_loss(&m, &y, &w).unwrap().0.total) / (2.0 * eps);
            assert!((fd - g.data[i]).abs() <= 1e-5 * fd.abs().max(g.data[i].abs()), "{i}");
        }
    }

    #[test]
    fn mismatched_dimensions() {
        assert!(image_loss(&Image::new(8, 8, 3), &Image::new(8, 7, 3), &LossWeights::default()).is_err());
    }
}
