//! Optimizer, learning-rate schedule, and the two training phases: pixel
//! (L1) pretraining, then adversarial + perceptual fine-tuning.

pub mod data;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{perceptual_loss, total_generator_loss, FeatureExtractor, MultiScaleDiscriminator, PROB_EPS};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::metrics::{psnr, ssim};
use crate::nn::ParamStore;
use crate::resample::{degrade_bicubic, upscale_bicubic};
use crate::tensor::{Element, Tensor};

pub use data::{sample_batch, synthetic_corpus, synthetic_image, Augment, Batch, TrainingSet};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    /// Steps between learning-rate halvings.
    pub halving_period: u64,
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// LR patch side for pixel training.
    pub patch: usize,
    /// LR patch side for adversarial fine-tuning.
    pub adv_patch: usize,
    pub scales: Vec<u32>,
    /// Weight of the perceptual term in the generator objective.
    pub lambda: f64,
    /// Weight of an optional L1 term during fine-tuning.
    pub pixel_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::full()
    }
}

impl TrainConfig {
    pub fn full() -> Self {
        TrainConfig {
            batch: 64,
            lr: 1e-4,
            halving_period: 400_000,
            phase1_steps: 600_000,
            phase2_steps: 400_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patch: 48,
            adv_patch: 48,
            scales: vec![2, 4],
            lambda: 100.0,
            pixel_weight: 0.0,
            seed: 0,
        }
    }

    /// Small enough to run on a laptop CPU in minutes.
    pub fn desk() -> Self {
        TrainConfig {
            batch: 8,
            lr: 3e-3,
            halving_period: 1_000,
            phase1_steps: 2_000,
            phase2_steps: 200,
            patch: 24,
            adv_patch: 32,
            scales: vec![2],
            ..TrainConfig::full()
        }
    }

    pub fn validate(&self, supported: &[u32]) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("train.{key} {why}")));
        if self.batch == 0 {
            return bad("batch", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.halving_period == 0 {
            return bad("halving_period", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if self.patch == 0 || self.adv_patch == 0 {
            return bad("patch", "must be positive");
        }
        if self.scales.is_empty() {
            return bad("scales", "must list at least one scale");
        }
        if let Some(s) = self.scales.iter().find(|s| !supported.contains(s)) {
            return Err(Error::UnsupportedScale(*s));
        }
        if !(self.lambda >= 0.0) || !(self.pixel_weight >= 0.0) {
            return bad("lambda/pixel_weight", "must be non-negative");
        }
        Ok(())
    }
}

/// `lr0 * 2^-floor(step / period)`.
pub fn lr_schedule(step: u64, lr0: f64, period: u64) -> f64 {
    lr0 * 0.5f64.powi((step / period.max(1)).min(i32::MAX as u64) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        AdamParams {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// Moment buffers, one per canonical parameter (tied tensors share one).
#[derive(Clone, Debug, Default)]
pub struct AdamState<T: Element = f32> {
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    pub step: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor<T>> {
        self.m.get(index).and_then(Option::as_ref)
    }

    pub fn entries(&self) -> usize {
        self.m.iter().filter(|m| m.is_some()).count()
    }
}

/// One bias-corrected ADAM update of every parameter holding a gradient.
/// Parameters the loss did not reach are left untouched; a store with no
/// gradients at all is an error.
pub fn adam_step<T: Element>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, hp: AdamParams) -> Result<()> {
    let ids: Vec<_> = store.ids().filter(|&id| store.grad(id).is_some()).collect();
    if ids.is_empty() {
        return Err(Error::MissingGrad("every parameter (backward was not run)".into()));
    }
    state.m.resize(store.len(), None);
    state.v.resize(store.len(), None);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (T::from_f64(hp.beta1), T::from_f64(hp.beta2));
    let (ib1, ib2) = (T::from_f64(1.0 - hp.beta1), T::from_f64(1.0 - hp.beta2));
    let step_size = T::from_f64(lr / c1);
    let inv_sqrt_c2 = T::from_f64(1.0 / c2.sqrt());
    let eps = T::from_f64(hp.eps);
    for id in ids {
        let g = store.grad(id).expect("filtered").clone();
        let i = id.index();
        let shape = g.shape();
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(shape));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(shape));
        let p = store.get_mut(id);
        for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *m = b1 * *m + ib1 * g;
            *v = b2 * *v + ib2 * g * g;
            *p = *p - step_size * *m / (v.sqrt() * inv_sqrt_c2 + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pixel,
    Adversarial,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pixel => "pixel",
            Phase::Adversarial => "adv",
        })
    }
}

/// Discriminator-side diagnostics of one fine-tuning step.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscStats {
    pub d_loss: f64,
    pub min_prob: f64,
    pub max_prob: f64,
    pub extents: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub phase: Phase,
    pub scale: u32,
    pub loss_pixel: f64,
    pub loss_adv: f64,
    pub loss_perc: f64,
    pub lr: f64,
    pub disc: Option<DiscStats>,
}

impl fmt::Display for LossRecord {
    /// `step phase scale loss_pixel loss_adv loss_perc lr`, followed on
    /// fine-tuning steps by `d_loss min_prob max_prob HxW,HxW,...`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {:.9e} {:.9e} {:.9e} {:.9e}",
            self.step, self.phase, self.scale, self.loss_pixel, self.loss_adv, self.loss_perc, self.lr
        )?;
        if let Some(d) = &self.disc {
            let extents: Vec<String> = d.extents.iter().map(|(h, w)| format!("{h}x{w}")).collect();
            write!(f, " {:.9e} {:.9e} {:.9e} {}", d.d_loss, d.min_prob, d.max_prob, extents.join(","))?;
        }
        Ok(())
    }
}

fn check_finite(values: &[f64], step: u64, lr: f64) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: step as usize,
            lr,
        })
    }
}

/// Pixel-loss pretraining. `on_step` sees every record before the next
/// step starts; an error from it stops training.
pub fn train_phase1(
    gen: &mut Generator<f32>,
    cfg: &TrainConfig,
    set: &TrainingSet,
    on_step: &mut dyn FnMut(&LossRecord) -> Result<()>,
) -> Result<AdamState<f32>> {
    cfg.validate(&gen.spec.scales)?;
    set.check(&cfg.scales, cfg.patch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new();
    let hp = AdamParams::from(cfg);
    for step in 0..cfg.phase1_steps {
        let lr = lr_schedule(step, cfg.lr, cfg.halving_period);
        let batch = sample_batch(set, &cfg.scales, cfg.patch, cfg.batch, &mut rng)?;
        let loss = {
            let tape = Tape::new();
            let p = gen.store.bind(&tape, true);
            let x = tape.constant(batch.lr);
            let y = tape.constant(batch.hr);
            let sr = gen.forward(&tape, &p, &x, batch.scale)?;
            let loss = tape.l1(&sr, &y)?;
            let value = loss.item() as f64;
            check_finite(&[value], step, lr)?;
            let mut grads = tape.backward(&loss)?;
            gen.store.absorb_grads(&p, &mut grads);
            value
        };
        adam_step(&mut gen.store, &mut state, lr, hp)?;
        on_step(&LossRecord {
            step,
            phase: Phase::Pixel,
            scale: batch.scale,
            loss_pixel: loss,
            loss_adv: 0.0,
            loss_perc: 0.0,
            lr,
            disc: None,
        })?;
    }
    Ok(state)
}

/// Adversarial fine-tuning: per step one discriminator update on a fresh
/// batch, then one generator update against the updated discriminators.
pub fn train_phase2(
    gen: &mut Generator<f32>,
    msd: &mut MultiScaleDiscriminator<f32>,
    fx: &FeatureExtractor<f32>,
    cfg: &TrainConfig,
    set: &TrainingSet,
    on_step: &mut dyn FnMut(&LossRecord) -> Result<()>,
) -> Result<()> {
    cfg.validate(&gen.spec.scales)?;
    set.check(&cfg.scales, cfg.adv_patch)?;
    for &r in &cfg.scales {
        let hp = cfg.adv_patch * r as usize;
        msd.extents(hp, hp)?;
        if hp % fx.stride() != 0 {
            return Err(Error::Config(format!(
                "x{r} HR patch {hp} is not divisible by the feature extractor stride {}",
                fx.stride()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xad7e_25a1);
    let (mut g_state, mut d_state) = (AdamState::new(), AdamState::new());
    let hp = AdamParams::from(cfg);
    for step in 0..cfg.phase2_steps {
        let lr = lr_schedule(step, cfg.lr, cfg.halving_period);
        let batch = sample_batch(set, &cfg.scales, cfg.adv_patch, cfg.batch, &mut rng)?;
        let sr_fixed = gen.infer(&batch.lr, batch.scale)?;

        let disc = {
            let tape = Tape::new();
            let p = msd.store.bind(&tape, true);
            let real = tape.constant(batch.hr.clone());
            let fake = tape.constant(sr_fixed);
            let out = msd.judge(&tape, &p, &real, &fake)?;
            let (d_loss, _) = out.losses(&tape)?;
            let probs: Vec<f64> = out
                .real
                .iter()
                .chain(&out.fake)
                .flat_map(|v| v.value().data().iter().map(|&x| x as f64).collect::<Vec<_>>())
                .collect();
            let stats = DiscStats {
                d_loss: d_loss.item() as f64,
                min_prob: probs.iter().copied().fold(f64::INFINITY, f64::min),
                max_prob: probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                extents: out.extents.clone(),
            };
            check_finite(&[stats.d_loss], step, lr)?;
            let mut grads = tape.backward(&d_loss)?;
            msd.store.absorb_grads(&p, &mut grads);
            stats
        };
        adam_step(&mut msd.store, &mut d_state, lr, hp)?;

        let (pixel, adv, perc) = {
            let tape = Tape::new();
            let pg = gen.store.bind(&tape, true);
            let pd = msd.store.bind(&tape, false);
            let pf = fx.bind(&tape);
            let x = tape.constant(batch.lr);
            let hr = tape.constant(batch.hr);
            let sr = gen.forward(&tape, &pg, &x, batch.scale)?;
            let mut adv: Option<crate::Var<f32>> = None;
            for prob in msd.forward(&tape, &pd, &sr)? {
                let term = tape.neg_log_mean(&prob, true, PROB_EPS);
                adv = Some(match adv {
                    None => term,
                    Some(a) => tape.add(&a, &term)?,
                });
            }
            let adv = adv.expect("at least one scale");
            let perc = perceptual_loss(fx, &tape, &pf, &sr, &hr)?;
            let pixel = tape.l1(&sr, &hr)?;
            let mut total = total_generator_loss(&tape, &adv, &perc, cfg.lambda)?;
            if cfg.pixel_weight > 0.0 {
                total = tape.add(&total, &tape.scale(&pixel, cfg.pixel_weight))?;
            }
            let values = (pixel.item() as f64, adv.item() as f64, perc.item() as f64);
            check_finite(&[values.0, values.1, values.2, total.item() as f64], step, lr)?;
            let mut grads = tape.backward(&total)?;
            gen.store.absorb_grads(&pg, &mut grads);
            values
        };
        adam_step(&mut gen.store, &mut g_state, lr, hp)?;

        on_step(&LossRecord {
            step,
            phase: Phase::Adversarial,
            scale: batch.scale,
            loss_pixel: pixel,
            loss_adv: adv,
            loss_perc: perc,
            lr,
            disc: Some(disc),
        })?;
    }
    Ok(())
}

/// Quality of one image: model output and bicubic baseline against HR.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub psnr: f64,
    pub ssim: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scale: u32,
    pub images: Vec<ImageScore>,
}

impl EvalReport {
    fn mean(&self, f: impl Fn(&ImageScore) -> f64) -> f64 {
        self.images.iter().map(f).sum::<f64>() / self.images.len().max(1) as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean(|s| s.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean(|s| s.ssim)
    }

    pub fn mean_bicubic_psnr(&self) -> f64 {
        self.mean(|s| s.bicubic_psnr)
    }

    pub fn mean_bicubic_ssim(&self) -> f64 {
        self.mean(|s| s.bicubic_ssim)
    }
}

/// Degrade each HR image (cropped to a multiple of `scale`), super-resolve
/// it, and score the clamped `[0,1]` output against the original.
pub fn evaluate(gen: &Generator<f32>, hr_images: &[Tensor<f32>], scale: u32) -> Result<EvalReport> {
    let r = scale as usize;
    let mut images = Vec::with_capacity(hr_images.len());
    for hr in hr_images {
        let s = hr.shape();
        let hr = hr.crop(0, 0, s.h - s.h % r, s.w - s.w % r)?;
        let lr = degrade_bicubic(&hr, r)?;
        let sr = gen.infer(&lr, scale)?.map(|v| v.clamp(0.0, 1.0));
        let bic = upscale_bicubic(&lr, r)?.map(|v| v.clamp(0.0, 1.0));
        images.push(ImageScore {
            psnr: psnr(&sr, &hr, 1.0)?,
            ssim: ssim(&sr, &hr, 1.0)?,
            bicubic_psnr: psnr(&bic, &hr, 1.0)?,
            bicubic_ssim: ssim(&bic, &hr, 1.0)?,
        });
    }
    Ok(EvalReport { scale, images })
}
