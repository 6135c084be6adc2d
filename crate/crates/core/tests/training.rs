//! Optimizer, sampling, and both training phases on tiny models.

use pcarn_core::adversarial::{build_feature_extractor, build_multiscale, DiscriminatorConfig, FeatureConfig};
use pcarn_core::generator::{build_generator, Generator, ModelSpec};
use pcarn_core::nn::{init_histogram, InitScheme, ParamStore};
use pcarn_core::resample::degrade_bicubic;
use pcarn_core::training::{
    adam_step, evaluate, lr_schedule, synthetic_corpus, train_phase1, train_phase2, AdamParams, AdamState, Augment,
    LossRecord, Phase, TrainConfig, TrainingSet,
};
use pcarn_core::weights::encode;
use pcarn_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        blocks: 2,
        units: 2,
        channels: 8,
        scales: vec![2, 4],
        ..ModelSpec::pcarn()
    }
}

fn tiny_config(steps: u64) -> TrainConfig {
    TrainConfig {
        batch: 2,
        lr: 1e-3,
        halving_period: 3,
        phase1_steps: steps,
        phase2_steps: steps,
        patch: 8,
        adv_patch: 16,
        scales: vec![2],
        seed: 4,
        ..TrainConfig::desk()
    }
}

#[test]
fn adam_matches_textbook_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("w", Tensor::from_fn([2, 3, 1, 1], |_, _, _, _| rng.gen_range(-1.0..1.0))).unwrap();
    let untouched = store.insert("frozen", Tensor::full([1, 1, 1, 1], 0.25)).unwrap();
    let hp = AdamParams {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut state = AdamState::new();
    let mut p: Vec<f64> = store.get(id).data().to_vec();
    let (mut m, mut v) = (vec![0.0; 6], vec![0.0; 6]);
    for t in 1..=25 {
        let g: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        store.set_grad(id, Some(Tensor::from_vec([2, 3, 1, 1], g.clone()).unwrap()));
        let lr = lr_schedule(t - 1, 0.01, 10);
        adam_step(&mut store, &mut state, lr, hp).unwrap();
        for i in 0..6 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let m_hat = m[i] / (1.0 - 0.9f64.powi(t as i32));
            let v_hat = v[i] / (1.0 - 0.999f64.powi(t as i32));
            p[i] -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        }
        for (a, b) in store.get(id).data().iter().zip(&p) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "step {t}: {a} vs {b}");
        }
    }
    assert_eq!(store.get(untouched).data(), &[0.25]);
    assert_eq!(state.step, 25);
}

#[test]
fn schedule_halves_on_period() {
    assert_eq!(lr_schedule(0, 1e-4, 400_000), 1e-4);
    assert_eq!(lr_schedule(399_999, 1e-4, 400_000), 1e-4);
    assert_eq!(lr_schedule(400_000, 1e-4, 400_000), 5e-5);
    assert_eq!(lr_schedule(800_000, 1e-4, 400_000), 2.5e-5);
}

#[test]
fn augmentation_commutes_with_degradation() {
    let hr = synthetic_corpus(1, 24, 3).remove(0);
    for aug in Augment::all() {
        for r in [2, 3, 4] {
            let a = degrade_bicubic(&aug.apply(&hr), r).unwrap();
            let b = aug.apply(&degrade_bicubic(&hr, r).unwrap());
            assert!(a.max_abs_diff(&b) < 1e-6, "{aug:?} x{r}");
        }
    }
}

fn run_phase1(seed: u64) -> (Vec<LossRecord>, Vec<u8>) {
    let set = TrainingSet::new(synthetic_corpus(4, 32, 1)).unwrap();
    let mut gen: Generator<f32> = build_generator(&tiny_spec(), InitScheme::default(), seed).unwrap();
    let cfg = TrainConfig { seed, ..tiny_config(6) };
    let mut log = Vec::new();
    train_phase1(&mut gen, &cfg, &set, &mut |r| {
        log.push(r.clone());
        Ok(())
    })
    .unwrap();
    (log, encode(&gen.store))
}

#[test]
fn phase1_is_deterministic_and_logs_every_step() {
    let (log_a, w_a) = run_phase1(4);
    let (log_b, w_b) = run_phase1(4);
    assert_eq!(log_a.len(), 6);
    assert_eq!(log_a, log_b);
    assert_eq!(w_a, w_b);
    assert!(log_a.iter().all(|r| r.phase == Phase::Pixel && r.loss_pixel.is_finite()));
    assert_eq!(log_a[3].lr, 5e-4);
    let (_, w_c) = run_phase1(5);
    assert_ne!(w_a, w_c);
}

#[test]
fn phase1_stops_on_non_finite_loss() {
    let mut images = synthetic_corpus(2, 32, 1);
    images[1].data_mut().iter_mut().for_each(|v| *v = f32::NAN);
    let set = TrainingSet::new(images).unwrap();
    let mut gen: Generator<f32> = build_generator(&tiny_spec(), InitScheme::default(), 0).unwrap();
    let mut seen = 0;
    let err = train_phase1(&mut gen, &tiny_config(4), &set, &mut |_| {
        seen += 1;
        Ok(())
    })
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert!(seen < 4);
}

#[test]
fn phase2_smoke() {
    let set = TrainingSet::new(synthetic_corpus(3, 72, 2)).unwrap();
    let mut gen: Generator<f32> = build_generator(&tiny_spec(), InitScheme::default(), 1).unwrap();
    let mut msd = build_multiscale(
        &DiscriminatorConfig {
            base_width: 8,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let fx = build_feature_extractor(&FeatureConfig::default()).unwrap();
    let cfg = TrainConfig {
        adv_patch: 32,
        ..tiny_config(6)
    };
    let before = encode(&gen.store);
    let mut log = Vec::new();
    train_phase2(&mut gen, &mut msd, &fx, &cfg, &set, &mut |r| {
        log.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(log.len(), 6);
    for r in &log {
        assert_eq!(r.phase, Phase::Adversarial);
        assert!(r.loss_adv.is_finite() && r.loss_perc.is_finite() && r.loss_pixel.is_finite());
        let d = r.disc.as_ref().unwrap();
        assert!(d.d_loss.is_finite());
        assert!(d.min_prob > 0.0 && d.max_prob < 1.0);
        assert_eq!(d.extents, [(64, 64), (32, 32), (16, 16)]);
    }
    assert_ne!(before, encode(&gen.store));
}

#[test]
fn evaluation_scores_model_and_bicubic() {
    let gen: Generator<f32> = build_generator(&tiny_spec(), InitScheme::default(), 0).unwrap();
    let images = synthetic_corpus(2, 33, 9);
    let report = evaluate(&gen, &images, 2).unwrap();
    assert_eq!(report.images.len(), 2);
    for s in &report.images {
        assert!(s.bicubic_psnr > s.psnr, "an untrained model should lose to bicubic");
        assert!(s.bicubic_ssim <= 1.0 && s.ssim <= 1.0);
    }
}

#[test]
fn init_histograms_follow_protocol() {
    let spec = ModelSpec {
        channels: 32,
        ..ModelSpec::pcarn()
    };
    for scheme in InitScheme::all() {
        let gen: Generator<f32> = build_generator(&spec, scheme, 0).unwrap();
        let hist = init_histogram(&gen.store, 1000, 100_000, 0).unwrap();
        assert_eq!(hist.counts.len(), 1000);
        assert_eq!(hist.total(), 100_000);
        assert!(hist.mean().abs() < 3.0 * hist.bin_width(), "{scheme}: mean {}", hist.mean());
        assert!(hist.min < 0.0 && hist.max > 0.0);
        assert_eq!(hist, init_histogram(&gen.store, 1000, 100_000, 0).unwrap());
    }
}
