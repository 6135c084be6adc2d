//! Central finite-difference checks of every differentiable op, in `f64`.

use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{
    adversarial_losses, build_feature_extractor, build_multiscale, multiscale_loss, perceptual_loss,
    DiscriminatorConfig, FeatureConfig,
};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::generator::{build_generator, ModelSpec};
use crate::nn::InitScheme;
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{Shape, Tensor};

/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates probed per input tensor.
pub const PROBES: usize = 24;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub op: String,
    pub shapes: String,
    pub max_rel_err: f64,
    pub probes: usize,
    /// Probes whose `[x-h, x+h]` interval straddled a kink and were excluded.
    pub kinks: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<18} {:<40} max_rel_err {:.3e} ({} probes, {} at kinks)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.op,
            self.shapes,
            self.max_rel_err,
            self.probes,
            self.kinks
        )
    }
}

type OpFn<'a> = dyn Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'a;

/// Compare reverse-mode gradients of `f(inputs)` against central differences
/// with step `h`. Non-scalar outputs are reduced with fixed random weights.
pub fn check(op: &str, inputs: &[Tensor<f64>], h: f64, seed: u64, f: &OpFn<'_>) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scalar = |tape: &Tape<f64>, vars: &[Var<f64>], weights: &Option<Tensor<f64>>| -> Result<Var<f64>> {
        let out = f(tape, vars)?;
        match weights {
            Some(w) => tape.weighted_sum(&out, w.clone()),
            None => Ok(out),
        }
    };
    let eval = |values: &[Tensor<f64>], weights: &Option<Tensor<f64>>| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<_> = values.iter().map(|v| tape.constant(v.clone())).collect();
        Ok(scalar(&tape, &vars, weights)?.item())
    };

    let probe_shape = {
        let tape = Tape::no_grad();
        let vars: Vec<_> = inputs.iter().map(|v| tape.constant(v.clone())).collect();
        f(&tape, &vars)?.shape()
    };
    let weights = (probe_shape.numel() != 1)
        .then(|| Tensor::from_fn(probe_shape, |_, _, _, _| rng.gen_range(-1.0..1.0)));

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let loss = scalar(&tape, &vars, &weights)?;
    let grads = tape.backward(&loss)?;

    let base = eval(inputs, &weights)?;
    let mut worst = 0.0f64;
    let (mut probes, mut kinks) = (0, 0);
    for (i, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(var.shape());
        let analytic = grads.get(var).unwrap_or(&zero);
        let n = inputs[i].numel();
        let picks = index::sample(&mut rng, n, PROBES.min(n)).into_vec();
        for j in picks {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let (up, down) = (eval(&plus, &weights)?, eval(&minus, &weights)?);
            probes += 1;
            if straddles_kink(up - base, base - down) {
                kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    let shapes = inputs
        .iter()
        .map(|t| t.shape().to_string())
        .collect::<Vec<_>>()
        .join(" ");
    Ok(CheckResult {
        op: op.to_string(),
        shapes,
        max_rel_err: worst,
        probes,
        kinks,
    })
}

/// One-sided differences that disagree far beyond the smooth `O(h)`
/// curvature term mean the function is not differentiable inside the
/// probe interval.
fn straddles_kink(forward: f64, backward: f64) -> bool {
    let scale = forward.abs().max(backward.abs());
    scale > 0.0 && (forward - backward).abs() > 1e-2 * scale
}

/// Values in `[-1, 1]` kept at least `margin` away from zero, so kinked ops
/// are never probed across their kink.
fn away_from_zero(shape: impl Into<Shape>, margin: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m: f64 = rng.gen_range(margin..1.0);
        if rng.gen() {
            m
        } else {
            -m
        }
    })
}

fn uniform(shape: impl Into<Shape>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// The full suite: every op on three random shapes. Each round draws its
/// extents from a disjoint range, so the three shapes always differ.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let h = 1e-5;
    for round in 0..3u64 {
        let s = seed.wrapping_mul(31).wrapping_add(round);
        let n = rng.gen_range(1..3);
        let hw = 3 + 2 * round as usize + rng.gen_range(0..2);
        let (hh, ww) = (2 * hw, 2 * hw + 2);

        // Convolutions: dense 3x3, grouped 3x3, 1x1 and strided.
        for (name, cin, cout, k, stride, groups) in [
            ("conv3x3", 3, 4, 3, 1, 1),
            ("conv3x3_grouped", 4, 6, 3, 1, 2),
            ("conv1x1", 5, 3, 1, 1, 1),
            ("conv3x3_stride2", 2, 3, 3, 2, 1),
        ] {
            let cin = cin + round as usize * groups;
            let x = uniform([n, cin, hh, ww], -1.0, 1.0, &mut rng);
            let w = uniform([cout, cin / groups, k, k], -0.5, 0.5, &mut rng);
            let b = uniform([1, cout, 1, 1], -0.5, 0.5, &mut rng);
            let geom = ConvGeom::new(stride, k / 2, groups);
            out.push(check(name, &[x, w, b], h, s, &|t, v| t.conv2d(&v[0], &v[1], Some(&v[2]), geom))?);
        }

        let c = rng.gen_range(1..5);
        let x = away_from_zero([n, c, hh, ww], 0.05, &mut rng);
        out.push(check("relu", &[x.clone()], h, s, &|t, v| Ok(t.relu(&v[0])))?);
        out.push(check("leaky_relu", &[x.clone()], h, s, &|t, v| Ok(t.leaky_relu(&v[0], 0.2)))?);
        let z = uniform([n, c, hh, ww], -4.0, 4.0, &mut rng);
        out.push(check("sigmoid", &[z], h, s, &|t, v| Ok(t.sigmoid(&v[0])))?);

        let r = [2, 3, 2][round as usize];
        let x = uniform([n, c * r * r, hw, hw + 1], -1.0, 1.0, &mut rng);
        out.push(check("pixel_shuffle", &[x], h, s, &|t, v| t.pixel_shuffle(&v[0], r))?);

        let x = uniform([n, c, hh, ww], -1.0, 1.0, &mut rng);
        out.push(check("avg_pool2", &[x.clone()], h, s, &|t, v| t.avg_pool2(&v[0]))?);
        out.push(check("global_avg_pool", &[x.clone()], h, s, &|t, v| Ok(t.global_avg_pool(&v[0])))?);

        let y = uniform([n, c + 1, hh, ww], -1.0, 1.0, &mut rng);
        let z = uniform([n, 2, hh, ww], -1.0, 1.0, &mut rng);
        out.push(check("concat", &[x.clone(), y, z], h, s, &|t, v| t.concat_channels(&[&v[0], &v[1], &v[2]]))?);

        let y = uniform([n, c, hh, ww], -1.0, 1.0, &mut rng);
        out.push(check("add", &[x.clone(), y.clone()], h, s, &|t, v| t.add(&v[0], &v[1]))?);
        out.push(check("scale", &[x.clone()], h, s, &|t, v| Ok(t.scale(&v[0], -1.7)))?);
        out.push(check("mean", &[x.clone()], h, s, &|t, v| Ok(t.mean(&v[0])))?);
        out.push(check("l2", &[x.clone(), y], h, s, &|t, v| t.l2(&v[0], &v[1]))?);
        let offset = away_from_zero([n, c, hh, ww], 0.05, &mut rng);
        let mut y = x.clone();
        y.add_assign(&offset);
        out.push(check("l1", &[x, y], h, s, &|t, v| t.l1(&v[0], &v[1]))?);

        let real = uniform([round as usize + 2, 1, 1, 1], 0.05, 0.95, &mut rng);
        let fake = uniform([round as usize + 2, 1, 1, 1], 0.05, 0.95, &mut rng);
        out.push(check("adv_loss_d", &[real.clone(), fake.clone()], h, s, &|t, v| {
            Ok(adversarial_losses(t, &v[0], &v[1])?.0)
        })?);
        out.push(check("adv_loss_g", &[real, fake], h, s, &|t, v| Ok(adversarial_losses(t, &v[0], &v[1])?.1))?);

        // Composite losses through whole networks.
        let fx = build_feature_extractor::<f64>(&FeatureConfig {
            widths: vec![3, 4, 4, 4, 4],
            convs_per_group: 1,
            seed: s,
        })?;
        let side = 16 * (round as usize + 1);
        let sr = uniform([1, 3, side, side], 0.0, 1.0, &mut rng);
        let hr = uniform([1, 3, side, side], 0.0, 1.0, &mut rng);
        out.push(check("perceptual_loss", &[sr, hr], h, s, &|t, v| {
            let p = fx.bind(t);
            perceptual_loss(&fx, t, &p, &v[0], &v[1])
        })?);

        let mut msd = build_multiscale::<f64>(
            &DiscriminatorConfig {
                base_width: 2,
                ..Default::default()
            },
            s,
        )?;
        // Default-initialized stacks shrink per-pixel gradients towards the
        // relative-error floor; a gain of 2 per layer keeps them measurable.
        for id in msd.store.ids().collect::<Vec<_>>() {
            for v in msd.store.get_mut(id).data_mut() {
                *v *= 2.0;
            }
        }
        let side = 64 + 16 * round as usize;
        let sr = uniform([1, 3, side, side], 0.0, 1.0, &mut rng);
        let hr = uniform([1, 3, side, side], 0.0, 1.0, &mut rng);
        out.push(check("multiscale_d", &[sr.clone(), hr.clone()], h, s, &|t, v| {
            let p = msd.store.bind(t, false);
            Ok(multiscale_loss(&msd, t, &p, &v[0], &v[1])?.0)
        })?);
        out.push(check("multiscale_g", &[sr, hr], h, s, &|t, v| {
            let p = msd.store.bind(t, false);
            Ok(multiscale_loss(&msd, t, &p, &v[0], &v[1])?.1)
        })?);

        let spec = ModelSpec {
            blocks: 1,
            units: 2,
            channels: 4,
            group: if round == 0 { 1 } else { 2 },
            tied: round == 1,
            efficient: round != 0,
            scales: vec![2, 3, 4],
        };
        let gen = build_generator::<f64>(&spec, InitScheme::default(), s)?;
        let scale = [2, 3, 4][round as usize];
        let (lh, lw) = (4 + round as usize, 5);
        let lr = uniform([1, 3, lh, lw], 0.0, 1.0, &mut rng);
        let target = uniform([1, 3, lh * scale as usize, lw * scale as usize], 0.0, 1.0, &mut rng);
        out.push(check("generator_l1", &[lr, target], h, s, &|t, v| {
            let p = gen.store.bind(t, false);
            let sr = gen.forward(t, &p, &v[0], scale)?;
            t.l1(&sr, &v[1])
        })?);
    }
    Ok(out)
}
