//! Forward and backward kernels on raw tensors. The autodiff tape wraps these.

use super::{gemm, Element, Shape, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Stride, zero-padding, and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize, groups: usize) -> Self {
        ConvGeom {
            stride,
            pad,
            groups,
        }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub const fn same(k: usize, groups: usize) -> Self {
        ConvGeom::new(1, k / 2, groups)
    }
}

/// Output shape of `conv2d(x, w)`, validating every divisibility constraint.
///
/// Spatial extents follow `floor((H + 2p - K) / s) + 1`.
pub fn conv_output_shape(x: Shape, w: Shape, geom: ConvGeom) -> Result<Shape> {
    let ConvGeom {
        stride,
        pad,
        groups,
    } = geom;
    if groups == 0 {
        return Err(Error::shape("conv2d", "groups must be at least 1"));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be at least 1"));
    }
    if w.h != w.w || w.h % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square with odd size, got {}x{}", w.h, w.w),
        ));
    }
    if x.c % groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {} not divisible by groups {groups}", x.c),
        ));
    }
    if w.n % groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("output channels {} not divisible by groups {groups}", w.n),
        ));
    }
    if w.c != x.c / groups {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight input channels {} != input channels {} / groups {groups}",
                w.c, x.c
            ),
        ));
    }
    let k = w.h;
    if x.h + 2 * pad < k || x.w + 2 * pad < k {
        return Err(Error::shape(
            "conv2d",
            format!("input height/width {}x{} smaller than kernel {k}", x.h, x.w),
        ));
    }
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    Ok(Shape::new(x.n, w.n, oh, ow))
}

fn is_pointwise(k: usize, geom: ConvGeom) -> bool {
    k == 1 && geom.stride == 1 && geom.pad == 0
}

/// Unfold one group of one batch item into a `(cin_g*K*K) x (oh*ow)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    item: &[T],
    h: usize,
    w: usize,
    c0: usize,
    cin_g: usize,
    k: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let p = oh * ow;
    let (s, pad) = (geom.stride as isize, geom.pad as isize);
    for ci in 0..cin_g {
        let plane = &item[(c0 + ci) * h * w..(c0 + ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dst = &mut cols[row * p..(row + 1) * p];
                for y in 0..oh {
                    let iy = y as isize * s + kh as isize - pad;
                    let out = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        // Valid x satisfy 0 <= x + kw - pad < w.
                        let shift = kw as isize - pad;
                        let x0 = (-shift).clamp(0, ow as isize) as usize;
                        let x1 = (w as isize - shift).clamp(x0 as isize, ow as isize) as usize;
                        out[..x0].fill(T::zero());
                        out[x0..x1].copy_from_slice(&src[(x0 as isize + shift) as usize..(x1 as isize + shift) as usize]);
                        out[x1..].fill(T::zero());
                        continue;
                    }
                    for (x, o) in out.iter_mut().enumerate() {
                        let ix = x as isize * s + kw as isize - pad;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`] into one batch item.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &[T],
    h: usize,
    w: usize,
    c0: usize,
    cin_g: usize,
    k: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    item: &mut [T],
) {
    let p = oh * ow;
    let (s, pad) = (geom.stride as isize, geom.pad as isize);
    for ci in 0..cin_g {
        let plane = &mut item[(c0 + ci) * h * w..(c0 + ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let src = &cols[row * p..(row + 1) * p];
                for y in 0..oh {
                    let iy = y as isize * s + kh as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let row = &src[y * ow..(y + 1) * ow];
                    if s == 1 {
                        let shift = kw as isize - pad;
                        let x0 = (-shift).clamp(0, ow as isize) as usize;
                        let x1 = (w as isize - shift).clamp(x0 as isize, ow as isize) as usize;
                        let d = &mut dst[(x0 as isize + shift) as usize..(x1 as isize + shift) as usize];
                        for (a, &b) in d.iter_mut().zip(&row[x0..x1]) {
                            *a = *a + b;
                        }
                        continue;
                    }
                    for x in 0..ow {
                        let ix = x as isize * s + kw as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation with zero padding.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), weight.shape());
    let os = conv_output_shape(xs, ws, geom)?;
    if let Some(b) = bias {
        if b.numel() != ws.n {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} values for {} output channels", b.numel(), ws.n),
            ));
        }
    }
    let k = ws.h;
    let g = geom.groups;
    let (cin_g, cout_g) = (xs.c / g, ws.n / g);
    let p = os.plane();
    let kk = cin_g * k * k;
    let pointwise = is_pointwise(k, geom);
    let xd = x.data();
    let wd = weight.data();
    let mut out = Tensor::zeros(os);
    par::for_each_chunk_mut(out.data_mut(), os.item(), |n, out_item| {
        let item = &xd[n * xs.item()..(n + 1) * xs.item()];
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
        for gi in 0..g {
            let wg = &wd[gi * cout_g * kk..(gi + 1) * cout_g * kk];
            let rhs: &[T] = if pointwise {
                &item[gi * cin_g * p..(gi + 1) * cin_g * p]
            } else {
                im2col(item, xs.h, xs.w, gi * cin_g, cin_g, k, geom, os.h, os.w, &mut cols);
                &cols
            };
            let dst = &mut out_item[gi * cout_g * p..(gi + 1) * cout_g * p];
            gemm(false, false, cout_g, p, kk, T::one(), wg, rhs, T::zero(), dst);
        }
        if let Some(b) = bias {
            for (c, plane) in out_item.chunks_mut(p).enumerate() {
                let bv = b.data()[c];
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to the input, weight, and bias.
/// Each is computed only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeom,
    needs: [bool; 3],
) -> ConvGrads<T> {
    let (xs, ws, os) = (x.shape(), weight.shape(), grad_out.shape());
    let k = ws.h;
    let g = geom.groups;
    let (cin_g, cout_g) = (xs.c / g, ws.n / g);
    let p = os.plane();
    let kk = cin_g * k * k;
    let pointwise = is_pointwise(k, geom);
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();

    let input = needs[0].then(|| {
        let mut dx = Tensor::zeros(xs);
        par::for_each_chunk_mut(dx.data_mut(), xs.item(), |n, dx_item| {
            let gy = &gd[n * os.item()..(n + 1) * os.item()];
            let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
            for gi in 0..g {
                let wg = &wd[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                let gyg = &gy[gi * cout_g * p..(gi + 1) * cout_g * p];
                if pointwise {
                    let dst = &mut dx_item[gi * cin_g * p..(gi + 1) * cin_g * p];
                    gemm(true, false, kk, p, cout_g, T::one(), wg, gyg, T::zero(), dst);
                } else {
                    gemm(true, false, kk, p, cout_g, T::one(), wg, gyg, T::zero(), &mut cols);
                    col2im(&cols, xs.h, xs.w, gi * cin_g, cin_g, k, geom, os.h, os.w, dx_item);
                }
            }
        });
        dx
    });

    let weight_grad = needs[1].then(|| {
        // Per-item partials reduced in batch order keep the sum order fixed.
        let partials = par::map_indices(xs.n, |n| {
            let item = &xd[n * xs.item()..(n + 1) * xs.item()];
            let gy = &gd[n * os.item()..(n + 1) * os.item()];
            let mut part = vec![T::zero(); ws.numel()];
            let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
            for gi in 0..g {
                let rhs: &[T] = if pointwise {
                    &item[gi * cin_g * p..(gi + 1) * cin_g * p]
                } else {
                    im2col(item, xs.h, xs.w, gi * cin_g, cin_g, k, geom, os.h, os.w, &mut cols);
                    &cols
                };
                let gyg = &gy[gi * cout_g * p..(gi + 1) * cout_g * p];
                let dst = &mut part[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                gemm(false, true, cout_g, kk, p, T::one(), gyg, rhs, T::zero(), dst);
            }
            part
        });
        let mut dw = Tensor::zeros(ws);
        for part in &partials {
            for (a, &b) in dw.data_mut().iter_mut().zip(part) {
                *a = *a + b;
            }
        }
        dw
    });

    let bias = needs[2].then(|| {
        let mut db = Tensor::zeros([1, ws.n, 1, 1]);
        for n in 0..os.n {
            for c in 0..os.c {
                let start = (n * os.c + c) * p;
                let s = gd[start..start + p].iter().fold(T::zero(), |a, &b| a + b);
                db.data_mut()[c] = db.data()[c] + s;
            }
        }
        db
    });

    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

/// `(N, C*r*r, H, W) -> (N, C, H*r, W*r)` with
/// `out[n, c, r*h + a, r*w + b] = in[n, c*r*r + a*r + b, h, w]`.
pub fn pixel_shuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || s.c % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("channels {} not divisible by r^2 = {}", s.c, r * r),
        ));
    }
    let oc = s.c / (r * r);
    let os = Shape::new(s.n, oc, s.h * r, s.w * r);
    let mut out = Tensor::zeros(os);
    let (xd, od) = (x.data(), out.data_mut());
    for n in 0..s.n {
        for c in 0..oc {
            for a in 0..r {
                for b in 0..r {
                    let ic = c * r * r + a * r + b;
                    for h in 0..s.h {
                        let src = s.index(n, ic, h, 0);
                        let dst = os.index(n, c, h * r + a, 0);
                        for w in 0..s.w {
                            od[dst + w * r + b] = xd[src + w];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("extents {}x{} not divisible by {r}", s.h, s.w),
        ));
    }
    let os = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut out = Tensor::zeros(os);
    let (xd, od) = (x.data(), out.data_mut());
    for n in 0..os.n {
        for c in 0..s.c {
            for a in 0..r {
                for b in 0..r {
                    let oc = c * r * r + a * r + b;
                    for h in 0..os.h {
                        let dst = os.index(n, oc, h, 0);
                        let src = s.index(n, c, h * r + a, 0);
                        for w in 0..os.w {
                            od[dst + w] = xd[src + w * r + b];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Mean over non-overlapping 2x2 windows.
pub fn avg_pool2<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape(
            "avg_pool2",
            format!("height/width {}x{} must be even", s.h, s.w),
        ));
    }
    let quarter = T::from_f64(0.25);
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    Ok(Tensor::from_fn(os, |n, c, h, w| {
        let (y, x0) = (2 * h, 2 * w);
        (x.at(n, c, y, x0) + x.at(n, c, y, x0 + 1) + x.at(n, c, y + 1, x0) + x.at(n, c, y + 1, x0 + 1))
            * quarter
    }))
}

pub fn avg_pool2_backward<T: Element>(grad_out: &Tensor<T>) -> Tensor<T> {
    let s = grad_out.shape();
    let quarter = T::from_f64(0.25);
    Tensor::from_fn([s.n, s.c, s.h * 2, s.w * 2], |n, c, h, w| {
        grad_out.at(n, c, h / 2, w / 2) * quarter
    })
}

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::from_f64(1.0 / s.plane() as f64);
    let mut out = Tensor::zeros([s.n, s.c, 1, 1]);
    for (o, plane) in out.data_mut().iter_mut().zip(x.data().chunks(s.plane().max(1))) {
        *o = plane.iter().fold(T::zero(), |a, &b| a + b) * inv;
    }
    out
}

pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?
        .shape();
    let mut c = 0;
    for p in parts {
        let s = p.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::shape(
                "concat_channels",
                format!("N/H/W mismatch: {s} vs {first}"),
            ));
        }
        c += s.c;
    }
    let os = Shape::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..first.n {
        for p in parts {
            let item = p.shape().item();
            data.extend_from_slice(&p.data()[n * item..(n + 1) * item]);
        }
    }
    Tensor::from_vec(os, data)
}

/// Channel range `[c0, c0 + len)` of every batch item.
pub fn slice_channels<T: Element>(x: &Tensor<T>, c0: usize, len: usize) -> Tensor<T> {
    let s = x.shape();
    let mut data = Vec::with_capacity(s.n * len * s.plane());
    for n in 0..s.n {
        let start = (n * s.c + c0) * s.plane();
        data.extend_from_slice(&x.data()[start..start + len * s.plane()]);
    }
    Tensor::from_vec([s.n, len, s.h, s.w], data).expect("slice length")
}
