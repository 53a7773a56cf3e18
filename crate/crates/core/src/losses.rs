//! Photometric training loss (L1 + weighted D-SSIM) and evaluation metrics.

use crate::error::{invalid, Result};
use crate::image::Image;

/// Default D-SSIM weight in the color loss.
pub const DEFAULT_LAMBDA: f64 = 0.2;
/// Side length of the SSIM window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Dynamic range of linear images.
pub const PEAK: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub l1: f64,
    pub d_ssim: f64,
    pub lambda: f64,
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(invalid(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `L1 + λ·(1 − SSIM)/2` and its gradient with respect to `rendered`.
pub fn color_loss(rendered: &Image, target: &Image, lambda: f64) -> Result<(LossValue, Image)> {
    check_shapes(rendered, target)?;
    let count = rendered.data().len() as f64;
    let inv = 1.0 / count;
    let mut l1 = 0.0;
    let mut grad = Vec::with_capacity(rendered.data().len());
    for (&r, &t) in rendered.data().iter().zip(target.data()) {
        let d = r - t;
        l1 += d.abs();
        grad.push(if d > 0.0 {
            inv
        } else if d < 0.0 {
            -inv
        } else {
            0.0
        });
    }
    l1 *= inv;
    let (s, ds) = ssim_with_grad(rendered, target)?;
    let d_ssim = (1.0 - s) / 2.0;
    for (g, d) in grad.iter_mut().zip(ds.data()) {
        *g -= 0.5 * lambda * d;
    }
    let value = LossValue {
        total: l1 + lambda * d_ssim,
        l1,
        d_ssim,
        lambda,
    };
    Ok((value, Image::from_vec(rendered.width(), rendered.height(), grad)?))
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data().len();
    if n == 0 {
        return Err(invalid("empty image"));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// Normalized 1D Gaussian window.
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

/// Valid-mode separable correlation of a `w×h` plane with `k` on both axes.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                acc += kj * tmp[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `ow×oh` map back to `w×h`.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for (j, kj) in k.iter().enumerate() {
                tmp[(y + j) * ow + x] += kj * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (i, ki) in k.iter().enumerate() {
                out[y * w + x + i] += ki * v;
            }
        }
    }
    out
}

struct SsimMaps {
    value: f64,
    grad: Option<Vec<f64>>,
}

fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> SsimMaps {
    let k = gaussian_window();
    let c1 = (0.01 * PEAK) * (0.01 * PEAK);
    let c2 = (0.03 * PEAK) * (0.03 * PEAK);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, w, h, &k);
    let mu_y = filter_valid(y, w, h, &k);
    let e_xx = filter_valid(&xx, w, h, &k);
    let e_yy = filter_valid(&yy, w, h, &k);
    let e_xy = filter_valid(&xy, w, h, &k);
    let count = mu_x.len();
    let mut total = 0.0;
    let (mut a_map, mut b_map, mut d_map) = if want_grad {
        (vec![0.0; count], vec![0.0; count], vec![0.0; count])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..count {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = e_xx[i] - mx * mx;
        let syy = e_yy[i] - my * my;
        let sxy = e_xy[i] - mx * my;
        let a1 = 2.0 * mx * my + c1;
        let a2 = 2.0 * sxy + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = sxx + syy + c2;
        let s = (a1 * a2) / (b1 * b2);
        total += s;
        if want_grad {
            let alpha = s * (2.0 * my / a1 - 2.0 * mx / b1);
            let beta = 2.0 * s / a2;
            let delta = 2.0 * s / b2;
            a_map[i] = alpha - beta * my + delta * mx;
            b_map[i] = beta;
            d_map[i] = delta;
        }
    }
    let grad = want_grad.then(|| {
        let ga = filter_valid_adjoint(&a_map, w, h, &k);
        let gb = filter_valid_adjoint(&b_map, w, h, &k);
        let gd = filter_valid_adjoint(&d_map, w, h, &k);
        (0..w * h).map(|p| ga[p] + y[p] * gb[p] - x[p] * gd[p]).collect()
    });
    SsimMaps {
        value: total / count as f64,
        grad,
    }
}

fn check_ssim_shapes(a: &Image, b: &Image) -> Result<()> {
    check_shapes(a, b)?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(invalid(format!(
            "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

/// Mean SSIM over all valid 11×11 Gaussian windows and the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_ssim_shapes(a, b)?;
    let (w, h) = (a.width(), a.height());
    let mut total = 0.0;
    for c in 0..3 {
        total += ssim_channel(&a.channel(c), &b.channel(c), w, h, false).value;
    }
    Ok(total / 3.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    check_ssim_shapes(a, b)?;
    let (w, h) = (a.width(), a.height());
    let mut total = 0.0;
    let mut grad = vec![0.0; w * h * 3];
    for c in 0..3 {
        let maps = ssim_channel(&a.channel(c), &b.channel(c), w, h, true);
        total += maps.value;
        let count = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW)) as f64;
        let scale = 1.0 / (3.0 * count);
        for (p, g) in maps.grad.unwrap().into_iter().enumerate() {
            grad[p * 3 + c] = g * scale;
        }
    }
    Ok((total / 3.0, Image::from_vec(w, h, grad)?))
}
