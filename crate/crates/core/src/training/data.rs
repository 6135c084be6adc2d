//! Patch sampling, augmentation, and a synthetic image corpus.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::Corpus;
use crate::resample::degrade_bicubic;
use crate::tensor::{Element, Tensor};

/// High-resolution training images as (1,3,H,W) tensors in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub images: Vec<Tensor<f32>>,
}

impl TrainingSet {
    pub fn new(images: Vec<Tensor<f32>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyCorpus("the corpus holds no images".into()));
        }
        Ok(TrainingSet { images })
    }

    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        TrainingSet::new(corpus.images.iter().map(|r| r.image.to_tensor()).collect())
    }

    /// Indices of images with room for an `hr_patch` square crop.
    pub fn eligible(&self, hr_patch: usize) -> Vec<usize> {
        self.images
            .iter()
            .enumerate()
            .filter(|(_, t)| t.shape().h >= hr_patch && t.shape().w >= hr_patch)
            .map(|(i, _)| i)
            .collect()
    }

    /// Fail early when some scale has no usable image; warn about images
    /// that are too small for some scale.
    pub fn check(&self, scales: &[u32], patch: usize) -> Result<()> {
        for &r in scales {
            let hp = patch * r as usize;
            let n = self.eligible(hp).len();
            if n == 0 {
                return Err(Error::EmptyCorpus(format!(
                    "no image is at least {hp}x{hp} (x{r} with {patch}px patches)"
                )));
            }
            if n < self.images.len() {
                log::warn!("{} images smaller than {hp}x{hp} are skipped at x{r}", self.images.len() - n);
            }
        }
        Ok(())
    }
}

/// One of the eight square symmetries: `rot` quarter turns counter-clockwise
/// followed by an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub rot: u8,
    pub flip: bool,
}

impl Augment {
    pub const IDENTITY: Augment = Augment { rot: 0, flip: false };

    pub fn all() -> impl Iterator<Item = Augment> {
        (0..8u8).map(|i| Augment {
            rot: i % 4,
            flip: i >= 4,
        })
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Augment {
            rot: rng.gen_range(0..4),
            flip: rng.gen(),
        }
    }

    pub fn apply<T: Element>(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut out = t.clone();
        for _ in 0..self.rot {
            let s = out.shape();
            out = Tensor::from_fn([s.n, s.c, s.w, s.h], |n, c, y, x| out.at(n, c, x, s.w - 1 - y));
        }
        if self.flip {
            let s = out.shape();
            out = Tensor::from_fn(s, |n, c, y, x| out.at(n, c, y, s.w - 1 - x));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    pub scale: u32,
}

/// Draw one batch: a single scale, then per item a random eligible image,
/// a scale-aligned `patch*r` HR crop, its bicubic degradation, and one
/// shared random symmetry applied to both.
pub fn sample_batch(
    set: &TrainingSet,
    scales: &[u32],
    patch: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if scales.is_empty() || batch == 0 || patch == 0 {
        return Err(Error::Config("batch sampling needs scales, batch size and patch size".into()));
    }
    let scale = scales[rng.gen_range(0..scales.len())];
    let r = scale as usize;
    let hp = patch * r;
    let eligible = set.eligible(hp);
    if eligible.is_empty() {
        return Err(Error::EmptyCorpus(format!("no image is at least {hp}x{hp}")));
    }
    let mut lrs = Vec::with_capacity(batch);
    let mut hrs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let img = &set.images[eligible[rng.gen_range(0..eligible.len())]];
        let s = img.shape();
        let top = r * rng.gen_range(0..=(s.h - hp) / r);
        let left = r * rng.gen_range(0..=(s.w - hp) / r);
        let hr = img.crop(top, left, hp, hp)?;
        let lr = degrade_bicubic(&hr, r)?;
        let aug = Augment::random(rng);
        lrs.push(aug.apply(&lr));
        hrs.push(aug.apply(&hr));
    }
    Ok(Batch {
        lr: Tensor::stack(&lrs)?,
        hr: Tensor::stack(&hrs)?,
        scale,
    })
}

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

/// Procedural test image: a gradient background with hard-edged rectangles,
/// discs, stripe patches and checkerboards. Samples are multiples of 1/255
/// so a PNG round trip is exact.
pub fn synthetic_image(size: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let color = |rng: &mut dyn rand::RngCore| [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
    let (c0, c1) = (color(rng), color(rng));
    let diag: bool = rng.gen();
    let mut px: Vec<[f32; 3]> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f32, (i % size) as f32);
            let t = if diag { (x + y) / (2.0 * size as f32) } else { y / size as f32 };
            lerp(c0, c1, t)
        })
        .collect();
    let shapes = rng.gen_range(4..10);
    let sz = size as f32;
    for _ in 0..shapes {
        let kind = rng.gen_range(0..4);
        let (ca, cb) = (color(rng), color(rng));
        let cx = rng.gen_range(0.0..sz);
        let cy = rng.gen_range(0.0..sz);
        let half = rng.gen_range(sz * 0.08..sz * 0.3);
        let period = rng.gen_range(3.0f32..9.0);
        let angle = rng.gen_range(0.0f32..std::f32::consts::PI);
        let (sa, ca_) = angle.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside_box = dx.abs() < half && dy.abs() < half;
                let value = match kind {
                    0 => inside_box.then_some(ca),
                    1 => (dx * dx + dy * dy < half * half).then_some(ca),
                    2 if inside_box => {
                        let u = dx * ca_ + dy * sa;
                        Some(if (u / period).floor() as i64 % 2 == 0 { ca } else { cb })
                    }
                    3 if inside_box => {
                        let k = ((dx / period).floor() + (dy / period).floor()) as i64;
                        Some(if k % 2 == 0 { ca } else { cb })
                    }
                    _ => None,
                };
                if let Some(v) = value {
                    px[y * size + x] = v;
                }
            }
        }
    }
    Tensor::from_fn([1, 3, size, size], |_, c, y, x| (px[y * size + x][c] * 255.0).round() / 255.0)
}

/// `count` synthetic images drawn from `seed`.
pub fn synthetic_corpus(count: usize, size: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| synthetic_image(size, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augment_group_structure() {
        let t = Tensor::<f32>::from_fn([1, 1, 3, 4], |_, _, h, w| (h * 4 + w) as f32);
        let quarter = Augment { rot: 1, flip: false };
        assert_eq!(quarter.apply(&t).shape().dims(), [1, 1, 4, 3]);
        // Top-right corner moves to top-left under a counter-clockwise turn.
        assert_eq!(quarter.apply(&t).at(0, 0, 0, 0), 3.0);
        let full = (0..4).fold(t.clone(), |acc, _| quarter.apply(&acc));
        assert_eq!(full, t);
        let flip = Augment { rot: 0, flip: true };
        assert_eq!(flip.apply(&flip.apply(&t)), t);
        assert_eq!(Augment::all().count(), 8);
    }

    #[test]
    fn batch_shapes_and_determinism() {
        let set = TrainingSet::new(synthetic_corpus(3, 40, 1)).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..4 {
            let x = sample_batch(&set, &[2, 4], 10, 3, &mut a).unwrap();
            let y = sample_batch(&set, &[2, 4], 10, 3, &mut b).unwrap();
            let r = x.scale as usize;
            assert_eq!(x.lr.shape().dims(), [3, 3, 10, 10]);
            assert_eq!(x.hr.shape().dims(), [3, 3, 10 * r, 10 * r]);
            assert_eq!((x.lr, x.hr, x.scale), (y.lr, y.hr, y.scale));
        }
    }

    #[test]
    fn undersized_corpus_rejected() {
        let set = TrainingSet::new(synthetic_corpus(2, 20, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_batch(&set, &[2], 12, 1, &mut rng), Err(Error::EmptyCorpus(_))));
        assert!(set.check(&[2], 12).is_err());
        assert!(TrainingSet::new(Vec::new()).is_err());
    }

    #[test]
    fn synthetic_is_quantized_and_seeded() {
        let a = synthetic_corpus(2, 16, 5);
        assert_eq!(a, synthetic_corpus(2, 16, 5));
        assert!(a[0].data().iter().all(|&v| (0.0..=1.0).contains(&v) && ((v * 255.0).round() / 255.0) == v));
    }
}
