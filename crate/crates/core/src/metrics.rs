//! Image quality metrics and bilinear resampling.

use crate::error::{CodecError, Result};
use crate::image::{ImageTensor, CHANNELS};

/// Reported for identical images in place of +∞.
pub const PSNR_CAP: f64 = 100.0;

/// `10·log₁₀(1/MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(a.mse(b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Smallest side accepted by [`ms_ssim`]: the coarsest of five dyadic
/// scales must still hold one 11-pixel window.
pub const MS_SSIM_MIN_SIDE: usize = (WINDOW - 1) * 16 + 1;

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Single-channel plane, row-major.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channel(img: &ImageTensor, c: usize) -> Self {
        Self {
            h: img.height(),
            w: img.width(),
            v: img.data().iter().skip(c).step_by(CHANNELS).copied().collect(),
        }
    }

    fn map2(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Valid separable Gaussian filtering.
    fn blur(&self, k: &[f64; WINDOW]) -> Plane {
        let (oh, ow) = (self.h + 1 - WINDOW, self.w + 1 - WINDOW);
        let mut tmp = vec![0.0; self.h * ow];
        for y in 0..self.h {
            let row = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                tmp[y * ow + x] = k.iter().zip(&row[x..x + WINDOW]).map(|(a, b)| a * b).sum();
            }
        }
        let mut v = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                v[y * ow + x] = (0..WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
            }
        }
        Plane { h: oh, w: ow, v }
    }

    /// 2×2 average pooling, dropping an odd trailing row or column.
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let at = |dy: usize, dx: usize| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v[y * w + x] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
        Plane { h, w, v }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_terms(x: &Plane, y: &Plane, k: &[f64; WINDOW]) -> (f64, f64) {
    let mx = x.blur(k);
    let my = y.blur(k);
    let sxx = x.map2(x, |a, b| a * b).blur(k);
    let syy = y.map2(y, |a, b| a * b).blur(k);
    let sxy = x.map2(y, |a, b| a * b).blur(k);
    let n = mx.v.len();
    let (mut ssim, mut cs) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (ux, uy) = (mx.v[i], my.v[i]);
        let vx = sxx.v[i] - ux * ux;
        let vy = syy.v[i] - uy * uy;
        let cov = sxy.v[i] - ux * uy;
        let c = (2.0 * cov + C2) / (vx + vy + C2);
        let l = (2.0 * ux * uy + C1) / (ux * ux + uy * uy + C1);
        cs.push(c);
        ssim.push(l * c);
    }
    (mean(&ssim), mean(&cs))
}

/// Five-scale MS-SSIM (Gaussian window 11, σ 1.5, standard scale weights),
/// computed per channel and averaged. Negative per-scale terms are clipped
/// to zero.
pub fn ms_ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.height().min(a.width()) < MS_SSIM_MIN_SIDE {
        return Err(CodecError::InvalidInput(format!(
            "MS-SSIM needs both sides >= {MS_SSIM_MIN_SIDE}, image is {}x{}",
            a.height(),
            a.width()
        )));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..CHANNELS {
        let (mut x, mut y) = (Plane::channel(a, c), Plane::channel(b, c));
        let mut score = 1.0;
        for (s, weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (ssim, cs) = ssim_terms(&x, &y, &k);
            let term = if s + 1 == MS_SSIM_WEIGHTS.len() { ssim } else { cs };
            score *= term.max(0.0).powf(*weight);
            x = x.downsample();
            y = y.downsample();
        }
        total += score;
    }
    Ok(total / CHANNELS as f64)
}

/// 1-D bilinear taps with half-pixel centers: output `o` reads
/// `(1−t)·in[i0] + t·in[i1]`.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of an interleaved `h × w × 3` buffer.
pub fn resize_bilinear(data: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut out = vec![0.0; oh * ow * CHANNELS];
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
            for c in 0..CHANNELS {
                let at = |yy: usize, xx: usize| data[(yy * w + xx) * CHANNELS + c];
                let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
                let bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
                out[(y * ow + x) * CHANNELS + c] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: maps a gradient on the resized buffer
/// back to the source.
pub fn resize_bilinear_adjoint(grad: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut out = vec![0.0; h * w * CHANNELS];
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
            for c in 0..CHANNELS {
                let g = grad[(y * ow + x) * CHANNELS + c];
                let mut add = |yy: usize, xx: usize, wgt: f64| out[(yy * w + xx) * CHANNELS + c] += wgt * g;
                add(y0, x0, (1.0 - fy) * (1.0 - fx));
                add(y0, x1, (1.0 - fy) * fx);
                add(y1, x0, fy * (1.0 - fx));
                add(y1, x1, fy * fx);
            }
        }
    }
    out
}
