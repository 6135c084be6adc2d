//! Kernels checked against direct, loop-level reference computations.

use pcarn_core::metrics::ssim;
use pcarn_core::resample::resize_bicubic;
use pcarn_core::tensor::kernels::{concat_channels, conv2d, pixel_shuffle, slice_channels, ConvGeom};
use pcarn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "support/reference.rs"]
mod reference;

use reference::{bicubic_direct, naive_conv, ssim_reference};

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // (n, cin, h, w, cout, k, stride, groups)
    let cases = [
        (1, 3, 7, 9, 4, 3, 1, 1),
        (2, 4, 8, 8, 6, 3, 2, 2),
        (1, 8, 5, 6, 8, 1, 1, 1),
        (2, 6, 6, 5, 9, 3, 1, 3),
        (1, 2, 9, 7, 3, 5, 2, 1),
        (1, 4, 1, 1, 4, 3, 1, 4),
    ];
    for (n, cin, h, w, cout, k, stride, groups) in cases {
        let x = random([n, cin, h, w], &mut rng);
        let wt = random([cout, cin / groups, k, k], &mut rng);
        let b = random([1, cout, 1, 1], &mut rng).reshape([cout, 1, 1, 1]).unwrap();
        let geom = ConvGeom::new(stride, k / 2, groups);
        let got = conv2d(&x, &wt, Some(&b), geom).unwrap();
        let want = naive_conv(&x, &wt, Some(&b), geom);
        assert_eq!(got.shape(), want.shape());
        let err = got.max_abs_diff(&want);
        assert!(err < 1e-6, "case {:?}: {err}", (n, cin, h, w, cout, k, stride, groups));
    }
}

#[test]
fn grouped_conv_is_per_group_decomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for groups in [2, 4, 8] {
        let (cin, cout) = (16, 24);
        let x = random([2, cin, 6, 7], &mut rng);
        let wt = random([cout, cin / groups, 3, 3], &mut rng);
        let grouped = conv2d(&x, &wt, None, ConvGeom::same(3, groups)).unwrap();
        let (ci, co) = (cin / groups, cout / groups);
        let parts: Vec<Tensor<f64>> = (0..groups)
            .map(|g| {
                let xg = slice_channels(&x, g * ci, ci);
                let wg = Tensor::from_fn([co, ci, 3, 3], |o, i, y, z| wt.at(g * co + o, i, y, z));
                conv2d(&xg, &wg, None, ConvGeom::same(3, 1)).unwrap()
            })
            .collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let stitched = concat_channels(&refs).unwrap();
        assert!(grouped.max_abs_diff(&stitched) < 1e-6, "groups {groups}");
    }
}

#[test]
fn pixel_shuffle_follows_index_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for r in [2usize, 3, 4] {
        let (n, c, h, w) = (2, 3, 4, 5);
        let x = random([n, c * r * r, h, w], &mut rng);
        let y = pixel_shuffle(&x, r).unwrap();
        assert_eq!(y.shape().dims(), [n, c, h * r, w * r]);
        for b in 0..n {
            for ch in 0..c {
                for yy in 0..h * r {
                    for xx in 0..w * r {
                        let src = x.at(b, ch * r * r + (yy % r) * r + xx % r, yy / r, xx / r);
                        assert_eq!(y.at(b, ch, yy, xx), src);
                    }
                }
            }
        }
    }
}

#[test]
fn bicubic_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random([1, 2, 12, 18], &mut rng);
    for (oh, ow) in [(24, 36), (36, 54), (48, 72), (6, 9), (4, 6), (3, 6), (12, 18), (17, 11)] {
        let got = resize_bicubic(&x, oh, ow).unwrap();
        let want = bicubic_direct(&x, oh, ow);
        let err = got.max_abs_diff(&want);
        assert!(err < 1e-5, "{oh}x{ow}: {err}");
    }
}

#[test]
fn ssim_matches_windowed_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for (n, h, w) in [(1, 16, 20), (2, 12, 12), (1, 8, 10), (1, 23, 17)] {
        let a: Tensor<f64> = Tensor::from_fn([n, 3, h, w], |_, _, _, _| rng.gen_range(0.0..1.0));
        let b = Tensor::from_fn([n, 3, h, w], |b, c, y, x| (a.at(b, c, y, x) + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0));
        for peak in [1.0, 255.0] {
            let got = ssim(&a, &b, peak).unwrap();
            let want = ssim_reference(&a, &b, peak);
            assert!((got - want).abs() < 1e-6, "{n}x{h}x{w} peak {peak}: {got} vs {want}");
        }
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }
}
