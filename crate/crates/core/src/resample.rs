//! Separable bicubic resampling (a = -0.5) with antialiasing on downscale.
//!
//! Sample centers sit at half-pixel offsets, so output pixel `i` maps to
//! input coordinate `(i + 0.5) / s - 0.5` for scale `s = out / in`. When
//! shrinking, the kernel is stretched by `1/s`. Out-of-range taps are
//! clamped to the border and each tap set is normalized to sum to one.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Element, Tensor};

pub const CUBIC_A: f64 = -0.5;

/// Keys' cubic convolution kernel.
pub fn cubic(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Input taps `(index, weight)` for every output position along one axis.
pub fn axis_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let k = scale.min(1.0);
    let support = 2.0 / k;
    (0..out_len)
        .map(|i| {
            let u = (i as f64 + 0.5) / scale - 0.5;
            let lo = (u - support).floor() as i64;
            let hi = (u + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for p in lo..=hi {
                let w = cubic(k * (u - p as f64));
                if w != 0.0 {
                    let idx = p.clamp(0, in_len as i64 - 1) as usize;
                    match taps.iter_mut().find(|t| t.0 == idx) {
                        Some(t) => t.1 += w,
                        None => taps.push((idx, w)),
                    }
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Resize every plane of `x` to `out_h x out_w`.
pub fn resize_bicubic<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("bicubic", format!("cannot resize {s} to {out_h}x{out_w}")));
    }
    let wy = axis_weights(s.h, out_h);
    let wx = axis_weights(s.w, out_w);
    let mut out = Tensor::zeros([s.n, s.c, out_h, out_w]);
    let src = x.data();
    par::for_each_chunk_mut(out.data_mut(), out_h * out_w, |plane, dst| {
        let src = &src[plane * s.plane()..(plane + 1) * s.plane()];
        // Horizontal pass into an (in_h x out_w) buffer, then vertical.
        let mut tmp = vec![0.0f64; s.h * out_w];
        for y in 0..s.h {
            let row = &src[y * s.w..(y + 1) * s.w];
            for (j, taps) in wx.iter().enumerate() {
                tmp[y * out_w + j] = taps.iter().map(|&(p, w)| row[p].as_f64() * w).sum();
            }
        }
        for (i, taps) in wy.iter().enumerate() {
            for j in 0..out_w {
                let v: f64 = taps.iter().map(|&(p, w)| tmp[p * out_w + j] * w).sum();
                dst[i * out_w + j] = T::from_f64(v);
            }
        }
    });
    Ok(out)
}

/// Shrink by an integer factor; both extents must be divisible by `r`.
pub fn degrade_bicubic<T: Element>(hr: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = hr.shape();
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::shape(
            "degrade",
            format!("{}x{} is not divisible by scale {r}", s.h, s.w),
        ));
    }
    resize_bicubic(hr, s.h / r, s.w / r)
}

/// Enlarge by an integer factor (the interpolation baseline).
pub fn upscale_bicubic<T: Element>(lr: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = lr.shape();
    resize_bicubic(lr, s.h * r, s.w * r)
}
