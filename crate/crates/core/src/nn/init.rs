//! The six weight-initialization schemes and the initialized-value histogram.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Distribution family together with its fan-in bound rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitRule {
    /// `N(0, sqrt(2/F))` (MSRA).
    Normal2,
    /// `U(-sqrt(6/F), sqrt(6/F))`.
    Uniform6,
    /// `U(-sqrt(1/F), sqrt(1/F))`.
    Uniform1,
}

impl InitRule {
    /// Standard deviation (normal) or half-width (uniform) for fan-in `f`.
    pub fn bound(self, fan_in: usize) -> f64 {
        let f = fan_in as f64;
        match self {
            InitRule::Normal2 => (2.0 / f).sqrt(),
            InitRule::Uniform6 => (6.0 / f).sqrt(),
            InitRule::Uniform1 => (1.0 / f).sqrt(),
        }
    }

    pub fn is_uniform(self) -> bool {
        !matches!(self, InitRule::Normal2)
    }
}

/// Multiplier applied to every draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitGain {
    Tenth,
    One,
}

impl InitGain {
    pub fn value(self) -> f64 {
        match self {
            InitGain::Tenth => 0.1,
            InitGain::One => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InitScheme {
    pub rule: InitRule,
    pub gain: InitGain,
}

impl Default for InitScheme {
    /// `1.0 x U(+-sqrt(1/F))`.
    fn default() -> Self {
        InitScheme::new(InitRule::Uniform1, InitGain::One)
    }
}

impl InitScheme {
    pub const fn new(rule: InitRule, gain: InitGain) -> Self {
        InitScheme { rule, gain }
    }

    /// All six constructible schemes, in table order.
    pub fn all() -> [InitScheme; 6] {
        use InitGain::*;
        use InitRule::*;
        [
            InitScheme::new(Normal2, Tenth),
            InitScheme::new(Normal2, One),
            InitScheme::new(Uniform6, Tenth),
            InitScheme::new(Uniform6, One),
            InitScheme::new(Uniform1, Tenth),
            InitScheme::new(Uniform1, One),
        ]
    }

    /// Effective std (normal) or half-width (uniform) after the gain.
    pub fn scale(&self, fan_in: usize) -> f64 {
        self.gain.value() * self.rule.bound(fan_in)
    }

    /// Fill a tensor whose fan-in is `C * K * K` of a `[Cout, C, K, K]` weight.
    pub fn sample<T: Element>(&self, shape: Shape, rng: &mut impl Rng) -> Result<Tensor<T>> {
        let fan_in = shape.c * shape.h * shape.w;
        if fan_in == 0 {
            return Err(Error::shape("init", format!("zero fan-in for weight {shape}")));
        }
        let s = self.scale(fan_in);
        let mut out = Tensor::zeros(shape);
        if self.rule.is_uniform() {
            for v in out.data_mut() {
                // Open interval: reject the single closed endpoint.
                let x = loop {
                    let x = (2.0 * rng.gen::<f64>() - 1.0) * s;
                    if x > -s {
                        break x;
                    }
                };
                *v = T::from_f64(x);
            }
        } else {
            let normal = Normal::new(0.0, s).expect("finite std");
            for v in out.data_mut() {
                *v = T::from_f64(normal.sample(rng));
            }
        }
        Ok(out)
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let gain = match self.gain {
            InitGain::Tenth => "0.1",
            InitGain::One => "1.0",
        };
        let rule = match self.rule {
            InitRule::Normal2 => "N(2/F)",
            InitRule::Uniform6 => "U(6/F)",
            InitRule::Uniform1 => "U(1/F)",
        };
        write!(f, "{gain}x{rule}")
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    /// Parses the [`Display`](fmt::Display) form, e.g. `1.0xU(1/F)`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown init scheme `{s}` (expected e.g. 1.0xU(1/F), 0.1xN(2/F), 1.0xU(6/F))"));
        let (gain, rule) = s.trim().split_once(['x', '*']).ok_or_else(bad)?;
        let gain = match gain.trim() {
            "0.1" => InitGain::Tenth,
            "1" | "1.0" => InitGain::One,
            _ => return Err(bad()),
        };
        let rule = match rule.trim() {
            "N(2/F)" => InitRule::Normal2,
            "U(6/F)" => InitRule::Uniform6,
            "U(1/F)" => InitRule::Uniform1,
            _ => return Err(bad()),
        };
        Ok(InitScheme::new(rule, gain))
    }
}

/// Draw one weight tensor with its own seed.
pub fn init_params(scheme: InitScheme, shape: impl Into<Shape>, seed: u64) -> Result<Tensor<f32>> {
    scheme.sample(shape.into(), &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Equal-width bin counts over `[min, max]` of the sampled values.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn from_values(values: &[f64], bins: usize) -> Result<Histogram> {
        if values.is_empty() {
            return Err(Error::Config("histogram of zero values".into()));
        }
        if bins == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (max - min) / bins as f64;
        let mut counts = vec![0u64; bins];
        for &v in values {
            let b = if width > 0.0 {
                (((v - min) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Ok(Histogram { min, max, counts })
    }

    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / self.counts.len() as f64
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        let w = self.bin_width();
        (0..self.counts.len()).map(move |i| self.min + (i as f64 + 0.5) * w)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count-weighted mean of the bin centers.
    pub fn mean(&self) -> f64 {
        let total = self.total() as f64;
        self.centers()
            .zip(&self.counts)
            .map(|(c, &n)| c * n as f64)
            .sum::<f64>()
            / total
    }

    /// One `bin_center count` pair per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (c, n) in self.centers().zip(&self.counts) {
            out.push_str(&format!("{c:.9e} {n}\n"));
        }
        out
    }
}

/// Histogram of up to `sample_cap` initialized weight values (biases are
/// excluded). When the model holds more, a seeded subset is drawn.
pub fn init_histogram<T: Element>(
    store: &ParamStore<T>,
    bins: usize,
    sample_cap: usize,
    seed: u64,
) -> Result<Histogram> {
    let values: Vec<f64> = store
        .iter()
        .filter(|(name, _)| name.ends_with(".weight"))
        .flat_map(|(_, t)| t.data().iter().map(|v| v.as_f64()))
        .collect();
    if values.is_empty() {
        return Err(Error::Config("parameter store holds no weights".into()));
    }
    if values.len() <= sample_cap {
        return Histogram::from_values(&values, bins);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, values.len(), sample_cap).into_vec();
    picked.sort_unstable();
    let subset: Vec<f64> = picked.into_iter().map(|i| values[i]).collect();
    Histogram::from_values(&subset, bins)
}
