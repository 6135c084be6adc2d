//! Discriminators, the fixed feature extractor, and the fine-tuning losses.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{make_conv_layer, Binding, Conv2d, ConvSpec, InitGain, InitRule, InitScheme, Initializer, ParamStore};
use crate::tensor::Element;

/// Probability clamp used by every log term.
pub const PROB_EPS: f64 = 1e-7;
/// Smallest spatial extent a discriminator accepts.
pub const MIN_DISC_EXTENT: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    /// Feature width of the first layer; later layers use 2x, 4x, 8x.
    pub base_width: usize,
    /// Number of image scales judged.
    pub scales: usize,
    pub slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_width: 64,
            scales: 3,
            slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    /// `(output channels, stride)` for each of the nine layers.
    pub fn schedule(&self) -> [(usize, usize); 9] {
        let w = self.base_width;
        [
            (w, 1),
            (w, 2),
            (2 * w, 1),
            (2 * w, 2),
            (4 * w, 1),
            (4 * w, 2),
            (8 * w, 1),
            (8 * w, 2),
            (1, 1),
        ]
    }
}

/// Nine 3x3 convs with leaky activations, global pooling and a sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub convs: Vec<Conv2d>,
    pub slope: f64,
}

impl Discriminator {
    fn build<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &DiscriminatorConfig,
        init: &mut Initializer,
    ) -> Result<Self> {
        let mut cin = 3;
        let mut convs = Vec::with_capacity(9);
        for (i, (cout, stride)) in cfg.schedule().into_iter().enumerate() {
            let spec = ConvSpec::new(cin, cout, 3).stride(stride);
            convs.push(make_conv_layer(store, &format!("{prefix}.conv{i}"), spec, None, init)?);
            cin = cout;
        }
        Ok(Discriminator {
            convs,
            slope: cfg.slope,
        })
    }

    /// Probability per image that it is a real high-resolution sample,
    /// shaped (N,1,1,1).
    pub fn forward<T: Element>(&self, tape: &Tape<T>, p: &Binding<T>, img: &Var<T>) -> Result<Var<T>> {
        let s = img.shape();
        if s.h < MIN_DISC_EXTENT || s.w < MIN_DISC_EXTENT {
            return Err(Error::shape(
                "discriminator",
                format!("input {}x{} is below the {MIN_DISC_EXTENT}x{MIN_DISC_EXTENT} minimum", s.h, s.w),
            ));
        }
        let last = self.convs.len() - 1;
        let mut h = img.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, p, &h)?;
            if i < last {
                h = tape.leaky_relu(&h, self.slope);
            }
        }
        Ok(tape.sigmoid(&tape.global_avg_pool(&h)))
    }
}

/// `(L_D, L_G_adv)` from discriminator outputs on real and generated images.
/// The generator term is the non-saturating `-mean(log D(fake))`.
pub fn adversarial_losses<T: Element>(tape: &Tape<T>, d_real: &Var<T>, d_fake: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    let d_loss = tape.add(
        &tape.neg_log_mean(d_real, true, PROB_EPS),
        &tape.neg_log_mean(d_fake, false, PROB_EPS),
    )?;
    Ok((d_loss, tape.neg_log_mean(d_fake, true, PROB_EPS)))
}

/// Independent discriminators judging successively 2x average-pooled copies.
#[derive(Clone)]
pub struct MultiScaleDiscriminator<T: Element = f32> {
    pub discs: Vec<Discriminator>,
    pub store: ParamStore<T>,
}

/// Per-scale outputs of one pass over a real/fake pair.
pub struct MultiScaleOutputs<T: Element> {
    pub real: Vec<Var<T>>,
    pub fake: Vec<Var<T>>,
    /// `(h, w)` each discriminator received.
    pub extents: Vec<(usize, usize)>,
}

pub fn build_multiscale<T: Element>(cfg: &DiscriminatorConfig, seed: u64) -> Result<MultiScaleDiscriminator<T>> {
    if cfg.scales == 0 {
        return Err(Error::spec("adv.scales", "must be at least 1"));
    }
    if cfg.base_width == 0 {
        return Err(Error::spec("adv.width", "must be at least 1"));
    }
    let mut store = ParamStore::new();
    let mut init = Initializer::new(InitScheme::default(), seed);
    let discs = (0..cfg.scales)
        .map(|i| Discriminator::build(&mut store, &format!("d{i}"), cfg, &mut init))
        .collect::<Result<_>>()?;
    Ok(MultiScaleDiscriminator { discs, store })
}

impl<T: Element> MultiScaleDiscriminator<T> {
    pub fn scales(&self) -> usize {
        self.discs.len()
    }

    /// Extents each discriminator sees for an `h x w` input.
    pub fn extents(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let div = 1usize << (self.scales() - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "multi-scale discriminator",
                format!("{h}x{w} is not divisible by {div}"),
            ));
        }
        Ok((0..self.scales()).map(|i| (h >> i, w >> i)).collect())
    }

    /// Run every discriminator on its pooled copy of `img`.
    pub fn forward(&self, tape: &Tape<T>, p: &Binding<T>, img: &Var<T>) -> Result<Vec<Var<T>>> {
        let s = img.shape();
        self.extents(s.h, s.w)?;
        let mut x = img.clone();
        let mut out = Vec::with_capacity(self.scales());
        for (i, d) in self.discs.iter().enumerate() {
            if i > 0 {
                x = tape.avg_pool2(&x)?;
            }
            out.push(d.forward(tape, p, &x)?);
        }
        Ok(out)
    }

    pub fn judge(&self, tape: &Tape<T>, p: &Binding<T>, real: &Var<T>, fake: &Var<T>) -> Result<MultiScaleOutputs<T>> {
        if real.shape() != fake.shape() {
            return Err(Error::shape("multi-scale discriminator", format!("{} vs {}", real.shape(), fake.shape())));
        }
        let s = real.shape();
        Ok(MultiScaleOutputs {
            extents: self.extents(s.h, s.w)?,
            real: self.forward(tape, p, real)?,
            fake: self.forward(tape, p, fake)?,
        })
    }
}

impl<T: Element> MultiScaleOutputs<T> {
    /// Sum over scales, in index order, of `(L_D, L_G_adv)`.
    pub fn losses(&self, tape: &Tape<T>) -> Result<(Var<T>, Var<T>)> {
        let mut total: Option<(Var<T>, Var<T>)> = None;
        for (r, f) in self.real.iter().zip(&self.fake) {
            let (d, g) = adversarial_losses(tape, r, f)?;
            total = Some(match total {
                None => (d, g),
                Some((td, tg)) => (tape.add(&td, &d)?, tape.add(&tg, &g)?),
            });
        }
        Ok(total.expect("at least one scale"))
    }
}

/// Multi-scale `(L_D, L_GAN)` for a generated/real pair.
pub fn multiscale_loss<T: Element>(
    msd: &MultiScaleDiscriminator<T>,
    tape: &Tape<T>,
    p: &Binding<T>,
    sr: &Var<T>,
    hr: &Var<T>,
) -> Result<(Var<T>, Var<T>)> {
    msd.judge(tape, p, hr, sr)?.losses(tape)
}

/// Frozen, seeded convolutional stack used as a perceptual feature space.
/// Five groups of 3x3 conv + relu, separated by 2x average pooling; the
/// features are taken after the last activation of the final group.
#[derive(Clone)]
pub struct FeatureExtractor<T: Element = f32> {
    pub groups: Vec<Vec<Conv2d>>,
    pub store: ParamStore<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub widths: Vec<usize>,
    pub convs_per_group: usize,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            widths: vec![16, 32, 64, 64, 64],
            convs_per_group: 2,
            seed: 0x5eed,
        }
    }
}

pub fn build_feature_extractor<T: Element>(cfg: &FeatureConfig) -> Result<FeatureExtractor<T>> {
    if cfg.widths.is_empty() || cfg.convs_per_group == 0 {
        return Err(Error::spec("adv.features", "needs at least one group with one conv"));
    }
    let mut store = ParamStore::new();
    let mut init = Initializer::new(InitScheme::new(InitRule::Normal2, InitGain::One), cfg.seed);
    let mut cin = 3;
    let mut groups = Vec::new();
    for (g, &width) in cfg.widths.iter().enumerate() {
        let mut convs = Vec::new();
        for j in 0..cfg.convs_per_group {
            let spec = ConvSpec::new(cin, width, 3);
            convs.push(make_conv_layer(&mut store, &format!("phi.{g}.{j}"), spec, None, &mut init)?);
            cin = width;
        }
        groups.push(convs);
    }
    Ok(FeatureExtractor { groups, store })
}

impl<T: Element> FeatureExtractor<T> {
    /// Spatial divisor the input must satisfy.
    pub fn stride(&self) -> usize {
        1 << (self.groups.len() - 1)
    }

    /// Features at the tap point. `p` must come from `self.store`.
    pub fn features(&self, tape: &Tape<T>, p: &Binding<T>, img: &Var<T>) -> Result<Var<T>> {
        let mut h = img.clone();
        for (g, convs) in self.groups.iter().enumerate() {
            if g > 0 {
                h = tape.avg_pool2(&h)?;
            }
            for conv in convs {
                h = tape.relu(&conv.forward(tape, p, &h)?);
            }
        }
        Ok(h)
    }

    /// Frozen binding: the extractor never receives gradients.
    pub fn bind(&self, tape: &Tape<T>) -> Binding<T> {
        self.store.bind(tape, false)
    }
}

/// Mean squared distance between tapped features of `sr` and `hr`.
pub fn perceptual_loss<T: Element>(
    fx: &FeatureExtractor<T>,
    tape: &Tape<T>,
    p: &Binding<T>,
    sr: &Var<T>,
    hr: &Var<T>,
) -> Result<Var<T>> {
    if sr.shape() != hr.shape() {
        return Err(Error::shape("perceptual loss", format!("{} vs {}", sr.shape(), hr.shape())));
    }
    let a = fx.features(tape, p, sr)?;
    let b = fx.features(tape, p, hr)?;
    tape.l2(&a, &b)
}

/// `L_GAN + lambda * L_perceptual`.
pub fn total_generator_loss<T: Element>(tape: &Tape<T>, adv: &Var<T>, perceptual: &Var<T>, lambda: f64) -> Result<Var<T>> {
    tape.add(adv, &tape.scale(perceptual, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn small() -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_width: 4,
            ..Default::default()
        }
    }

    fn image(n: usize, hw: usize, k: f64) -> Tensor<f64> {
        Tensor::from_fn([n, 3, hw, hw], |n, c, h, w| (((n + 1) * (c + 2) * (h + 3 * w)) as f64 * k).sin() * 0.5 + 0.5)
    }

    #[test]
    fn nine_layers_and_open_interval() {
        let msd: MultiScaleDiscriminator<f64> = build_multiscale(&small(), 1).unwrap();
        assert_eq!(msd.discs[0].convs.len(), 9);
        let tape = Tape::new();
        let p = msd.store.bind(&tape, false);
        let out = msd.discs[0].forward(&tape, &p, &tape.constant(image(4, 16, 0.1))).unwrap();
        assert_eq!(out.shape().dims(), [4, 1, 1, 1]);
        assert!(out.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        let extreme = tape.constant(Tensor::full([1, 3, 16, 16], 1e30));
        let e = msd.discs[0].forward(&tape, &p, &extreme).unwrap();
        assert!(e.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn too_small_rejected() {
        let msd: MultiScaleDiscriminator<f32> = build_multiscale(&small(), 1).unwrap();
        let tape = Tape::new();
        let p = msd.store.bind(&tape, false);
        assert!(msd.discs[0].forward(&tape, &p, &tape.constant(Tensor::zeros([1, 3, 15, 32]))).is_err());
        assert!(msd.extents(66, 64).is_err());
        assert_eq!(msd.extents(64, 32).unwrap(), vec![(64, 32), (32, 16), (16, 8)]);
    }

    #[test]
    fn half_half_loss() {
        let tape = Tape::<f64>::new();
        let half = tape.constant(Tensor::full([2, 1, 1, 1], 0.5));
        let (d, g) = adversarial_losses(&tape, &half, &half).unwrap();
        assert!((d.item() - 1.3863).abs() < 1e-4);
        assert!((g.item() - 2f64.ln()).abs() < 1e-12);
        let sure = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let (_, g) = adversarial_losses(&tape, &half, &sure).unwrap();
        assert!(g.item() < 1e-6 && g.item().is_finite());
    }

    #[test]
    fn multiscale_is_sum_of_scales() {
        let msd: MultiScaleDiscriminator<f64> = build_multiscale(&small(), 3).unwrap();
        let tape = Tape::new();
        let p = msd.store.bind(&tape, false);
        let hr = tape.constant(image(2, 64, 0.07));
        let sr = tape.constant(image(2, 64, 0.11));
        let (ld, lg) = multiscale_loss(&msd, &tape, &p, &sr, &hr).unwrap();

        let (mut hr_i, mut sr_i) = (hr.clone(), sr.clone());
        let (mut want_d, mut want_g) = (0.0, 0.0);
        for (i, d) in msd.discs.iter().enumerate() {
            if i > 0 {
                hr_i = tape.avg_pool2(&hr_i).unwrap();
                sr_i = tape.avg_pool2(&sr_i).unwrap();
            }
            let (a, b) = adversarial_losses(&tape, &d.forward(&tape, &p, &hr_i).unwrap(), &d.forward(&tape, &p, &sr_i).unwrap()).unwrap();
            want_d += a.item();
            want_g += b.item();
        }
        assert_eq!(ld.item(), want_d);
        assert_eq!(lg.item(), want_g);
    }

    #[test]
    fn single_scale_matches_plain_losses() {
        let cfg = DiscriminatorConfig { scales: 1, ..small() };
        let msd: MultiScaleDiscriminator<f64> = build_multiscale(&cfg, 3).unwrap();
        let tape = Tape::new();
        let p = msd.store.bind(&tape, false);
        let hr = tape.constant(image(1, 16, 0.3));
        let sr = tape.constant(image(1, 16, 0.2));
        let (ld, lg) = multiscale_loss(&msd, &tape, &p, &sr, &hr).unwrap();
        let d = &msd.discs[0];
        let (a, b) = adversarial_losses(&tape, &d.forward(&tape, &p, &hr).unwrap(), &d.forward(&tape, &p, &sr).unwrap()).unwrap();
        assert_eq!((ld.item(), lg.item()), (a.item(), b.item()));
    }

    #[test]
    fn perceptual_identity_and_symmetry() {
        let fx: FeatureExtractor<f64> = build_feature_extractor(&FeatureConfig {
            widths: vec![4, 4, 4, 4, 4],
            ..Default::default()
        })
        .unwrap();
        assert_eq!(fx.stride(), 16);
        let tape = Tape::new();
        let p = fx.bind(&tape);
        let a = tape.constant(image(1, 32, 0.1));
        let b = tape.constant(image(1, 32, 0.2));
        assert_eq!(perceptual_loss(&fx, &tape, &p, &a, &a).unwrap().item(), 0.0);
        let ab = perceptual_loss(&fx, &tape, &p, &a, &b).unwrap().item();
        let ba = perceptual_loss(&fx, &tape, &p, &b, &a).unwrap().item();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn total_loss_arithmetic() {
        let tape = Tape::<f64>::new();
        let half = tape.constant(Tensor::scalar(0.5));
        assert_eq!(total_generator_loss(&tape, &half, &half, 1.0).unwrap().item(), 1.0);
        assert_eq!(total_generator_loss(&tape, &half, &half, 0.0).unwrap().item(), 0.5);
    }
}
