use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Scalar};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// Set when the MSE is zero (or the value exceeds the cap).
    pub capped: bool,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Array<T>, b: &Array<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse<T: Scalar>(pred: &Array<T>, gt: &Array<T>) -> Result<f64> {
    same_shape("mse", pred, gt)?;
    if pred.is_empty() {
        return Err(Error::Invalid("mse of empty images".into()));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

/// `10·log10(max_val² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(pred: &Array<T>, gt: &Array<T>, max_val: f64) -> Result<Psnr> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(Psnr { db: PSNR_CAP_DB, capped: true });
    }
    let db = 10.0 * (max_val * max_val / m).log10();
    Ok(if db >= PSNR_CAP_DB {
        Psnr { db: PSNR_CAP_DB, capped: true }
    } else {
        Psnr { db, capped: false }
    })
}

/// Rec. 601 luma of a `[3, H, W]` image, row-major `H × W`.
pub fn luma<T: Scalar>(img: &Array<T>) -> Result<(Vec<f64>, usize, usize)> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::Invalid(format!("expected a [3, H, W] image, got {:?}", img.shape())));
    };
    let d = img.data();
    let n = h * w;
    let y = (0..n)
        .map(|i| 0.299 * d[i].as_f64() + 0.587 * d[n + i].as_f64() + 0.114 * d[2 * n + i].as_f64())
        .collect();
    Ok((y, h, w))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable Gaussian filter.
fn blur(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * x[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luma with an 11×11 Gaussian window (σ = 1.5),
/// averaged over all fully contained windows.
pub fn ssim<T: Scalar>(pred: &Array<T>, gt: &Array<T>) -> Result<f64> {
    same_shape("ssim", pred, gt)?;
    let (x, h, w) = luma(pred)?;
    let (y, _, _) = luma(gt)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}")));
    }
    let g = gaussian_taps();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = blur(&x, h, w, &g);
    let my = blur(&y, h, w, &g);
    let sxx = blur(&prod(&x, &x), h, w, &g);
    let syy = blur(&prod(&y, &y), h, w, &g);
    let sxy = blur(&prod(&x, &y), h, w, &g);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            ((2.0 * a * b + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((a * a + b * b + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}
