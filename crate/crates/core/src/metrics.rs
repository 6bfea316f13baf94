//! Image metrics and per-stage Gaussian statistics.

use hgs_autodiff::Tensor;

use crate::error::{CoreError, Result};
use crate::gaussians::GaussianSet;

pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::Input(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.numel().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Peak-1 PSNR in dB, capped at 99 for near-identical images.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_CAP } else { (-10.0 * m.log10()).min(PSNR_CAP) })
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable filtering over the valid region of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|i| k[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM over channels of `[H, W, C]` images (11x11 Gaussian window,
/// sigma 1.5, valid region only).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let [h, w, c] = a.shape()[..] else {
        return Err(CoreError::Input(format!("expected [H, W, C], got {:?}", a.shape())));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::Input(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let plane = |t: &Tensor| -> Vec<f64> { t.data().iter().skip(ch).step_by(c).copied().collect() };
        let (x, y) = (plane(a), plane(b));
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&prod(&x, &x), h, w, &k);
        let syy = filter_valid(&prod(&y, &y), h, w, &k);
        let sxy = filter_valid(&prod(&x, &y), h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageStatistics {
    pub stage: usize,
    pub count: usize,
    pub mean_opacity: f64,
    /// Scale of a primitive is the mean of its three extents.
    pub mean_scale: f64,
    pub median_scale: f64,
}

/// Aggregates for every stage present in `set`, in stage order.
pub fn gaussian_statistics(set: &GaussianSet) -> Vec<StageStatistics> {
    let mut stages: Vec<usize> = set.blocks.iter().map(|b| b.stage).collect();
    stages.sort_unstable();
    stages.dedup();
    stages
        .into_iter()
        .map(|stage| {
            let idx = set.stage_indices(stage);
            let n = idx.len().max(1) as f64;
            let mut scales: Vec<f64> = idx
                .iter()
                .map(|&i| set.scales.data()[3 * i..3 * i + 3].iter().sum::<f64>() / 3.0)
                .collect();
            let mean_opacity = idx.iter().map(|&i| set.opacities.data()[i]).sum::<f64>() / n;
            let mean_scale = scales.iter().sum::<f64>() / n;
            scales.sort_by(f64::total_cmp);
            let median_scale = match scales.len() {
                0 => 0.0,
                l if l % 2 == 1 => scales[l / 2],
                l => 0.5 * (scales[l / 2 - 1] + scales[l / 2]),
            };
            StageStatistics {
                stage,
                count: idx.len(),
                mean_opacity,
                mean_scale,
                median_scale,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(f: impl FnMut(usize) -> f64) -> Tensor {
        Tensor::from_fn(&[16, 16, 3], f)
    }

    #[test]
    fn identical_images() {
        let a = image(|i| (i % 13) as f64 / 13.0);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_known_mse() {
        let a = image(|_| 0.5);
        let b = image(|_| 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_shifted_constants_is_luminance_term() {
        let a = image(|_| 0.4);
        let b = image(|_| 0.5);
        let c1 = K1 * K1;
        let expect = (2.0 * 0.4 * 0.5 + c1) / (0.16 + 0.25 + c1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!(got < 1.0);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        assert!(psnr(&Tensor::zeros(&[2, 2, 3]), &Tensor::zeros(&[2, 3, 3])).is_err());
        assert!(ssim(&Tensor::zeros(&[4, 4, 3]), &Tensor::zeros(&[4, 4, 3])).is_err());
    }
}
