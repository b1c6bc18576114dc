//! Structural similarity with an 11×11 Gaussian window (σ = 1.5), zero
//! padding at the borders, and its exact gradient.

use crate::error::Result;
use crate::image::Image;

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Normalized 1D window; the 2D window is its outer product.
pub fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let r = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable same-size filtering of a `h×w` plane with zero padding.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

struct Moments {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn moments(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Moments {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    Moments {
        mx: blur(x, w, h, k),
        my: blur(y, w, h, k),
        exx: blur(&xx, w, h, k),
        eyy: blur(&yy, w, h, k),
        exy: blur(&xy, w, h, k),
    }
}

fn ssim_at(m: &Moments, i: usize) -> f64 {
    let (mx, my) = (m.mx[i], m.my[i]);
    let sxx = m.exx[i] - mx * mx;
    let syy = m.eyy[i] - my * my;
    let sxy = m.exy[i] - mx * my;
    ((2.0 * mx * my + C1) * (2.0 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))
}

/// SSIM per pixel and channel, in the image's sample layout.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    a.same_shape(b)?;
    let k = gaussian_window();
    let mut out = vec![0.0; a.data.len()];
    for c in 0..a.channels {
        let m = moments(&a.channel(c), &b.channel(c), a.width, a.height, &k);
        for i in 0..a.pixel_count() {
            out[i * a.channels + c] = ssim_at(&m, i);
        }
    }
    Ok(out)
}

/// Mean SSIM over all pixels and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let map = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len().max(1) as f64)
}

/// Mean SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad(x: &Image, y: &Image) -> Result<(f64, Image)> {
    x.same_shape(y)?;
    let k = gaussian_window();
    let n = x.data.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Image::new(x.width, x.height, x.channels);
    let np = x.pixel_count();
    for c in 0..x.channels {
        let xc = x.channel(c);
        let yc = y.channel(c);
        let m = moments(&xc, &yc, x.width, x.height, &k);
        let mut d_mx = vec![0.0; np];
        let mut d_exx = vec![0.0; np];
        let mut d_exy = vec![0.0; np];
        for i in 0..np {
            let (mx, my) = (m.mx[i], m.my[i]);
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * (m.exy[i] - mx * my) + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = m.exx[i] - mx * mx + m.eyy[i] - my * my + C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            let inv = 1.0 / (b1 * b2);
            // S = A1·A2 / (B1·B2) with σ's expanded in raw moments.
            d_mx[i] = (2.0 * my * a2 * inv - 2.0 * my * a1 * inv - s * 2.0 * mx / b1 + s * 2.0 * mx / b2) / n;
            d_exx[i] = -s / b2 / n;
            d_exy[i] = 2.0 * a1 * inv / n;
        }
        // The window is symmetric, so the adjoint of the blur is the blur.
        let g_m = blur(&d_mx, x.width, x.height, &k);
        let g_xx = blur(&d_exx, x.width, x.height, &k);
        let g_xy = blur(&d_exy, x.width, x.height, &k);
        for i in 0..np {
            grad.data[i * x.channels + c] = g_m[i] + 2.0 * xc[i] * g_xx[i] + yc[i] * g_xy[i];
        }
    }
    Ok((total / n, grad))
}
