//! PSNR and SSIM.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Value reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_MIN_EXTENT: usize = 8;

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)` over every sample, capped at [`PSNR_CAP`].
pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape("psnr", a, b)?;
    if a.numel() == 0 {
        return Err(Error::shape("psnr", "empty image"));
    }
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    let mse = sse / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// ITU-R BT.601 luma of batch item `n` as a row-major plane. Single-channel
/// inputs are returned as is.
pub fn luminance<T: Element>(t: &Tensor<T>, n: usize) -> Vec<f64> {
    let s = t.shape();
    let mut out = Vec::with_capacity(s.plane());
    for y in 0..s.h {
        for x in 0..s.w {
            out.push(if s.c >= 3 {
                0.299 * t.at(n, 0, y, x).as_f64() + 0.587 * t.at(n, 1, y, x).as_f64() + 0.114 * t.at(n, 2, y, x).as_f64()
            } else {
                t.at(n, 0, y, x).as_f64()
            });
        }
    }
    out
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Window side used for an `h x w` image: 11, shrunk (kept odd) for small inputs.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|j| taps[j] * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma planes, averaged over the batch.
/// `peak` is the dynamic range `L` of the samples.
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let s = a.shape();
    if s.h < SSIM_MIN_EXTENT || s.w < SSIM_MIN_EXTENT {
        return Err(Error::shape(
            "ssim",
            format!("{}x{} is below the {SSIM_MIN_EXTENT}x{SSIM_MIN_EXTENT} minimum", s.h, s.w),
        ));
    }
    let taps = gaussian_taps(ssim_window(s.h, s.w), SSIM_SIGMA);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mut total = 0.0;
    for n in 0..s.n {
        let x = luminance(a, n);
        let y = luminance(b, n);
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, s.h, s.w, &taps);
        let my = filter_valid(&y, s.h, s.w, &taps);
        let sxx = filter_valid(&prod(&x, &x), s.h, s.w, &taps);
        let syy = filter_valid(&prod(&y, &y), s.h, s.w, &taps);
        let sxy = filter_valid(&prod(&x, &y), s.h, s.w, &taps);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / s.n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_known_value() {
        let a = Tensor::<f64>::full([1, 1, 4, 4], 10.0);
        let b = Tensor::<f64>::full([1, 1, 4, 4], 11.0);
        assert!((psnr(&a, &b, 255.0).unwrap() - 48.1308).abs() < 1e-4);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &Tensor::zeros([1, 1, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = Tensor::<f64>::from_fn([1, 3, 16, 20], |_, c, h, w| ((c * 3 + h * w) as f64 * 0.17).sin() * 0.5 + 0.5);
        let b = Tensor::<f64>::from_fn([1, 3, 16, 20], |_, c, h, w| ((c + h + 2 * w) as f64 * 0.23).cos() * 0.5 + 0.5);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b, 1.0).unwrap();
        assert!((ab - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-9);
        assert!((-1.0..1.0).contains(&ab));
        assert!(ssim(&Tensor::<f64>::zeros([1, 3, 7, 9]), &Tensor::zeros([1, 3, 7, 9]), 1.0).is_err());
    }

    #[test]
    fn small_window_is_odd() {
        assert_eq!(ssim_window(8, 30), 7);
        assert_eq!(ssim_window(64, 64), 11);
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
    }
}
