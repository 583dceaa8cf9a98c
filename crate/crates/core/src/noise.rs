//! Salt-and-pepper (impulse) noise.
//!
//! Every sample independently draws `r₁, r₂ ~ U[0, 1)` from a ChaCha8 stream
//! seeded with [`NoiseConfig::seed`]. If `r₁ < p` the sample becomes pepper
//! (0) when `r₂ < ½` and salt (255) otherwise; if not, it is left untouched.
//! Both numbers are drawn for every sample, so the corruption of a sample
//! depends only on the seed and its position. Color channels are corrupted
//! independently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    /// Corruption probability `p` in `[0, 1]`.
    pub level: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(level: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&level) {
            return Err(Error::Config(format!("noise level must lie in [0, 1], got {level}")));
        }
        Ok(Self { level, seed })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Impulse {
    Keep,
    Pepper,
    Salt,
}

fn impulses(n: usize, cfg: NoiseConfig) -> impl Iterator<Item = Impulse> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..n).map(move |_| {
        let r1: f64 = rng.random();
        let r2: f64 = rng.random();
        match (r1 < cfg.level, r2 < 0.5) {
            (false, _) => Impulse::Keep,
            (true, true) => Impulse::Pepper,
            (true, false) => Impulse::Salt,
        }
    })
}

pub fn add_salt_pepper(image: &ImageBuffer, cfg: NoiseConfig) -> ImageBuffer {
    let mut out = image.clone();
    for (s, imp) in out.samples.iter_mut().zip(impulses(image.samples.len(), cfg)) {
        match imp {
            Impulse::Keep => {}
            Impulse::Pepper => *s = 0,
            Impulse::Salt => *s = 255,
        }
    }
    out
}

/// The same corruption applied to a unit-range tensor (pepper 0, salt 1).
///
/// Samples are visited in tensor order, so for a `1 × 1 × H × W` tensor this
/// matches [`add_salt_pepper`] on the corresponding gray image.
pub fn add_salt_pepper_tensor<T: Real>(t: &Tensor<T>, cfg: NoiseConfig) -> Tensor<T> {
    let mut out = t.clone();
    for (v, imp) in out.data_mut().iter_mut().zip(impulses(t.len(), cfg)) {
        match imp {
            Impulse::Keep => {}
            Impulse::Pepper => *v = T::zero(),
            Impulse::Salt => *v = T::one(),
        }
    }
    out
}

/// Fractions of samples that differ from `clean`, split by the value they
/// took.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CorruptionStats {
    pub corrupted: f64,
    pub salt: f64,
    pub pepper: f64,
}

pub fn corruption_stats(clean: &ImageBuffer, noisy: &ImageBuffer) -> Result<CorruptionStats> {
    if clean.dims() != noisy.dims() {
        return Err(crate::error::shape_err(
            "corruption_stats",
            format!("{:?} vs {:?}", clean.dims(), noisy.dims()),
        ));
    }
    let (mut changed, mut salt, mut pepper) = (0usize, 0usize, 0usize);
    for (&c, &n) in clean.samples.iter().zip(&noisy.samples) {
        if c != n {
            changed += 1;
            match n {
                255 => salt += 1,
                0 => pepper += 1,
                _ => {}
            }
        }
    }
    let total = clean.samples.len() as f64;
    Ok(CorruptionStats {
        corrupted: changed as f64 / total,
        salt: salt as f64 / total,
        pepper: pepper as f64 / total,
    })
}
