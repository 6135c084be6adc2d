//! Flat `key = value` run configuration.
//!
//! Keys carry a section prefix (`model.`, `train.`, `adv.`, `paths.`). Blank
//! lines and `#` comments are ignored; unknown keys are errors. Every key has
//! a default from the selected preset, and `dump` prints all of them in a
//! form `parse` reads back unchanged.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use pcarn_core::adversarial::{DiscriminatorConfig, FeatureConfig};
use pcarn_core::generator::ModelSpec;
use pcarn_core::nn::InitScheme;
use pcarn_core::training::TrainConfig;
use pcarn_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Reference configuration: 64 channels, batch 64, 48px patches.
    Full,
    /// Laptop-scale: 16 channels, x2 only, batch 8, 24px patches, 2,000 steps.
    Desk,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub weights_in: Option<PathBuf>,
    pub weights_out: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub init: InitScheme,
    pub train: TrainConfig,
    pub adv: DiscriminatorConfig,
    pub features: FeatureConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => RunConfig {
                model: ModelSpec::pcarn(),
                init: InitScheme::default(),
                train: TrainConfig::full(),
                adv: DiscriminatorConfig::default(),
                features: FeatureConfig::default(),
                paths: Paths::default(),
            },
            Preset::Desk => RunConfig {
                model: ModelSpec {
                    channels: 16,
                    scales: vec![2],
                    ..ModelSpec::pcarn()
                },
                init: InitScheme::default(),
                train: TrainConfig::desk(),
                adv: DiscriminatorConfig {
                    base_width: 16,
                    ..Default::default()
                },
                features: FeatureConfig::default(),
                paths: Paths::default(),
            },
        }
    }

    /// Apply `key = value` lines on top of `self`.
    pub fn parse_into(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(preset: Preset, text: &str) -> Result<Self> {
        let mut cfg = RunConfig::preset(preset);
        cfg.parse_into(text)?;
        Ok(cfg)
    }

    /// Apply a single `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim()).map_err(Error::Config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let a = &mut self.adv;
        let f = &mut self.features;
        let p = &mut self.paths;
        match key {
            "model.blocks" => m.blocks = num(key, value)?,
            "model.units" => m.units = num(key, value)?,
            "model.channels" => m.channels = num(key, value)?,
            "model.group" => m.group = num(key, value)?,
            "model.tied" => m.tied = num(key, value)?,
            "model.efficient" => m.efficient = num(key, value)?,
            "model.scales" => m.scales = list(key, value)?,
            "model.init" => self.init = num(key, value)?,
            "train.batch" => t.batch = num(key, value)?,
            "train.lr" => t.lr = num(key, value)?,
            "train.halving_period" => t.halving_period = num(key, value)?,
            "train.phase1_steps" => t.phase1_steps = num(key, value)?,
            "train.phase2_steps" => t.phase2_steps = num(key, value)?,
            "train.beta1" => t.beta1 = num(key, value)?,
            "train.beta2" => t.beta2 = num(key, value)?,
            "train.eps" => t.eps = num(key, value)?,
            "train.patch" => t.patch = num(key, value)?,
            "train.adv_patch" => t.adv_patch = num(key, value)?,
            "train.scales" => t.scales = list(key, value)?,
            "train.lambda" => t.lambda = num(key, value)?,
            "train.pixel_weight" => t.pixel_weight = num(key, value)?,
            "train.seed" => t.seed = num(key, value)?,
            "adv.width" => a.base_width = num(key, value)?,
            "adv.scales" => a.scales = num(key, value)?,
            "adv.slope" => a.slope = num(key, value)?,
            "adv.feature_widths" => f.widths = list(key, value)?,
            "adv.feature_convs" => f.convs_per_group = num(key, value)?,
            "adv.feature_seed" => f.seed = num(key, value)?,
            "paths.corpus" => p.corpus = path(value),
            "paths.weights_in" => p.weights_in = path(value),
            "paths.weights_out" => p.weights_out = path(value),
            "paths.log" => p.log = path(value),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, a, f, p) = (&self.model, &self.train, &self.adv, &self.features, &self.paths);
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("model.blocks", m.blocks.to_string()),
            ("model.units", m.units.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.group", m.group.to_string()),
            ("model.tied", m.tied.to_string()),
            ("model.efficient", m.efficient.to_string()),
            ("model.scales", join(&m.scales)),
            ("model.init", self.init.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.halving_period", t.halving_period.to_string()),
            ("train.phase1_steps", t.phase1_steps.to_string()),
            ("train.phase2_steps", t.phase2_steps.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.patch", t.patch.to_string()),
            ("train.adv_patch", t.adv_patch.to_string()),
            ("train.scales", join(&t.scales)),
            ("train.lambda", t.lambda.to_string()),
            ("train.pixel_weight", t.pixel_weight.to_string()),
            ("train.seed", t.seed.to_string()),
            ("adv.width", a.base_width.to_string()),
            ("adv.scales", a.scales.to_string()),
            ("adv.slope", a.slope.to_string()),
            ("adv.feature_widths", join(&f.widths)),
            ("adv.feature_convs", f.convs_per_group.to_string()),
            ("adv.feature_seed", f.seed.to_string()),
            ("paths.corpus", show(&p.corpus)),
            ("paths.weights_in", show(&p.weights_in)),
            ("paths.weights_out", show(&p.weights_out)),
            ("paths.log", show(&p.log)),
        ]
    }

    pub fn dump(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Check the model and training sections together.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model.scales)
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e| format!("`{key}`: cannot parse `{value}`: {e}"))
}

fn list<T: FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        for preset in [Preset::Full, Preset::Desk] {
            let mut cfg = RunConfig::preset(preset);
            cfg.train.lr = 0.1 + 0.2;
            cfg.init = "0.1xN(2/F)".parse().unwrap();
            cfg.paths.log = Some("runs/a b.log".into());
            let text = cfg.dump();
            // Re-parse against the other preset: every key is explicit.
            let other = if preset == Preset::Full { Preset::Desk } else { Preset::Full };
            assert_eq!(RunConfig::parse(other, &text).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        assert!(RunConfig::parse(Preset::Full, "model.colour = 3").is_err());
        assert!(RunConfig::parse(Preset::Full, "model.blocks").is_err());
        assert!(RunConfig::parse(Preset::Full, "model.blocks = many").is_err());
        let cfg = RunConfig::parse(Preset::Full, "# note\n\nmodel.blocks = 2 # trailing\n").unwrap();
        assert_eq!(cfg.model.blocks, 2);
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = RunConfig::preset(Preset::Desk);
        let mut copy = RunConfig::preset(Preset::Full);
        for (k, v) in cfg.entries() {
            copy.set(k, &v).unwrap();
        }
        assert_eq!(copy, cfg);
    }
}
