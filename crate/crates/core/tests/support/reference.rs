//! Loop-level reference computations shared by the oracle tests and the
//! acceptance suite.

use pcarn_core::tensor::kernels::ConvGeom;
use pcarn_core::Tensor;

pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, g: ConvGeom) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let oh = (xs.h + 2 * g.pad - k) / g.stride + 1;
    let ow = (xs.w + 2 * g.pad - k) / g.stride + 1;
    let cin_g = xs.c / g.groups;
    let cout_g = ws.n / g.groups;
    Tensor::from_fn([xs.n, ws.n, oh, ow], |n, co, oy, ox| {
        let grp = co / cout_g;
        let mut acc = bias.map_or(0.0, |b| b.data()[co]);
        for ci in 0..cin_g {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * g.stride + ky) as i64 - g.pad as i64;
                    let ix = (ox * g.stride + kx) as i64 - g.pad as i64;
                    if iy < 0 || ix < 0 || iy >= xs.h as i64 || ix >= xs.w as i64 {
                        continue;
                    }
                    acc += w.at(co, ci, ky, kx) * x.at(n, grp * cin_g + ci, iy as usize, ix as usize);
                }
            }
        }
        acc
    })
}

pub fn keys(t: f64) -> f64 {
    let t = t.abs();
    let a = -0.5;
    if t < 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Direct 2-D sum over every input pixel, with clamped borders folded in
/// by evaluating the kernel at each virtual (out-of-range) position.
pub fn bicubic_direct(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let s = x.shape();
    let (sy, sx) = (oh as f64 / s.h as f64, ow as f64 / s.w as f64);
    let (ky, kx) = (sy.min(1.0), sx.min(1.0));
    Tensor::from_fn([s.n, s.c, oh, ow], |n, c, i, j| {
        let u = (i as f64 + 0.5) / sy - 0.5;
        let v = (j as f64 + 0.5) / sx - 0.5;
        let (mut num, mut den) = (0.0, 0.0);
        let reach = |k: f64| (2.0 / k).ceil() as i64 + 2;
        for p in (u.floor() as i64 - reach(ky))..=(u.floor() as i64 + reach(ky)) {
            for q in (v.floor() as i64 - reach(kx))..=(v.floor() as i64 + reach(kx)) {
                let wgt = keys(ky * (u - p as f64)) * keys(kx * (v - q as f64));
                if wgt == 0.0 {
                    continue;
                }
                let py = p.clamp(0, s.h as i64 - 1) as usize;
                let qx = q.clamp(0, s.w as i64 - 1) as usize;
                num += wgt * x.at(n, c, py, qx);
                den += wgt;
            }
        }
        num / den
    })
}

/// Per-window statistics with explicit two-pass variance.
pub fn ssim_reference(a: &Tensor<f64>, b: &Tensor<f64>, peak: f64) -> f64 {
    let s = a.shape();
    let win = 11usize.min(s.h).min(s.w);
    let win = if win % 2 == 0 { win - 1 } else { win };
    let c = (win as f64 - 1.0) / 2.0;
    let mut g: Vec<Vec<f64>> = (0..win)
        .map(|i| {
            (0..win)
                .map(|j| (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * 1.5 * 1.5)).exp())
                .collect()
        })
        .collect();
    let total: f64 = g.iter().flatten().sum();
    g.iter_mut().flatten().for_each(|v| *v /= total);
    let luma = |t: &Tensor<f64>, n, y, x| 0.299 * t.at(n, 0, y, x) + 0.587 * t.at(n, 1, y, x) + 0.114 * t.at(n, 2, y, x);
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let mut batch_sum = 0.0;
    for n in 0..s.n {
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=s.h - win {
            for x0 in 0..=s.w - win {
                let cells = || (0..win).flat_map(|i| (0..win).map(move |j| (i, j)));
                let mean = |t: &Tensor<f64>| cells().map(|(i, j)| g[i][j] * luma(t, n, y0 + i, x0 + j)).sum::<f64>();
                let (mx, my) = (mean(a), mean(b));
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for (i, j) in cells() {
                    let dx = luma(a, n, y0 + i, x0 + j) - mx;
                    let dy = luma(b, n, y0 + i, x0 + j) - my;
                    vx += g[i][j] * dx * dx;
                    vy += g[i][j] * dy * dy;
                    cxy += g[i][j] * dx * dy;
                }
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        batch_sum += acc / count as f64;
    }
    batch_sum / s.n as f64
}
