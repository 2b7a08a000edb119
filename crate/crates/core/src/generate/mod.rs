//! Euler sampling of the flow ODE on foveated, naive and full-resolution layouts,
//! plus the seam and agreement metrics used to compare them.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::FoveationMask;
use crate::model::DiT;
use crate::numerics::{Real, Tensor};
use crate::tokenizer::{decode_sequence, pixel_mask, CodecConfig, FoveatedSequence, Image, LatentNorm, TokenLayout};
use crate::train::Checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Euler steps on a uniform grid from t=1 to t=0.
    pub steps: usize,
    pub seed: u64,
    pub class_id: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 50, seed: 0, class_id: 0 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("sampling needs at least one step"));
        }
        Ok(())
    }
}

const NOISE_SALT: u64 = 0x5a3b_1e00;

/// Standard normal `L × c` noise; every layout of the same length draws the same values.
pub fn initial_noise<F: Real>(len: usize, channels: usize, seed: u64) -> Tensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_SALT);
    Tensor::from_fn(&[len, channels], |_| F::lit(Distribution::<f64>::sample(&StandardNormal, &mut rng)))
}

/// Integrates `dz/dt = v(z, t)` from t=1 down to t=0 with `steps` uniform Euler steps.
pub fn euler<F: Real>(
    mut z: Tensor<F>,
    steps: usize,
    mut velocity: impl FnMut(&Tensor<F>, f64) -> Result<Tensor<F>>,
) -> Result<Tensor<F>> {
    if steps == 0 {
        return Err(Error::invalid("sampling needs at least one step"));
    }
    let dt = F::lit(1.0 / steps as f64);
    for i in 0..steps {
        let t = 1.0 - i as f64 / steps as f64;
        let v = velocity(&z, t)?;
        if v.shape() != z.shape() {
            return Err(Error::dim("euler", format!("velocity {:?} for state {:?}", v.shape(), z.shape())));
        }
        for (a, &b) in z.data_mut().iter_mut().zip(v.data()) {
            *a -= dt * b;
        }
    }
    Ok(z)
}

/// Denormalizes a clean latent sequence and decodes it to one image per frame.
pub fn decode_latent<F: Real>(codec: &CodecConfig, norm: &LatentNorm, seq: &FoveatedSequence<F>) -> Result<Vec<Image<f64>>> {
    let mut tokens = seq.tokens.cast::<f64>();
    norm.denormalize(&mut tokens);
    decode_sequence(codec, &FoveatedSequence::new(seq.layout.clone(), tokens)?)
}

/// A model plus the latent normalization it was trained with.
#[derive(Clone, Debug)]
pub struct Generator {
    pub model: DiT<f32>,
    pub norm: LatentNorm,
}

impl Generator {
    pub fn new(model: DiT<f32>, norm: LatentNorm) -> Result<Self> {
        if norm.mean.len() != model.config.channels() || norm.std.len() != model.config.channels() {
            return Err(Error::invalid("normalization constants do not match the model's channel count"));
        }
        Ok(Self { model, norm })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Self::new(ck.model()?, ck.meta.norm.clone())
    }

    /// Runs the sampler on `mask`'s layout and returns the clean latent sequence.
    pub fn sample_latent(&self, mask: &FoveationMask, config: &SampleConfig) -> Result<FoveatedSequence<f32>> {
        config.validate()?;
        if config.class_id >= self.model.config.num_classes {
            return Err(Error::invalid(format!("class {} out of range", config.class_id)));
        }
        let layout = Arc::new(TokenLayout::new(mask)?);
        let plan = self.model.plan(&layout)?;
        let noise = initial_noise::<f32>(layout.len(), self.model.config.channels(), config.seed);
        let z = euler(noise, config.steps, |z, t| {
            let seq = FoveatedSequence::new(layout.clone(), z.clone())?;
            Ok(self.model.forward_with_plan(&seq, t, config.class_id, &plan)?.tokens)
        })?;
        if !z.is_finite() {
            return Err(Error::NonFinite("sampled latent".into()));
        }
        FoveatedSequence::new(layout, z)
    }

    /// Samples and decodes: split, decode both grids, blend. One image per frame.
    pub fn sample(&self, mask: &FoveationMask, config: &SampleConfig) -> Result<Vec<Image<f64>>> {
        let seq = self.sample_latent(mask, config)?;
        decode_latent(&self.model.config.codec, &self.norm, &seq)
    }

    /// Full-resolution sampling: the all-ones layout on the same grid.
    pub fn sample_full(&self, frames: usize, height: usize, width: usize, config: &SampleConfig) -> Result<Vec<Image<f64>>> {
        self.sample(&FoveationMask::all_ones(frames, height, width)?, config)
    }
}

/// Foveated sampling with a model trained on foveated targets.
pub fn sample(ck: &Checkpoint, mask: &FoveationMask, config: &SampleConfig) -> Result<Vec<Image<f64>>> {
    Generator::from_checkpoint(ck)?.sample(mask, config)
}

/// The naive baseline: the same sampler on a foveated layout, but driven by a
/// model that only ever saw full-resolution sequences.
pub fn sample_naive(full_ck: &Checkpoint, mask: &FoveationMask, config: &SampleConfig) -> Result<Vec<Image<f64>>> {
    Generator::from_checkpoint(full_ck)?.sample(mask, config)
}

pub fn sample_full(ck: &Checkpoint, frames: usize, height: usize, width: usize, config: &SampleConfig) -> Result<Vec<Image<f64>>> {
    Generator::from_checkpoint(ck)?.sample_full(frames, height, width, config)
}

/// Wall-clock of `f` in seconds alongside its result.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Seam energy of each image (boundary ring minus matched rings).
    pub seam_a: f64,
    pub seam_b: f64,
    /// PSNR between the 2×-downsampled images, range 2, capped at 99 dB.
    pub psnr_down: f64,
    pub seconds_a: Option<f64>,
    pub seconds_b: Option<f64>,
}

pub fn evaluate_pair(a: &Image<f64>, b: &Image<f64>, mask: &FoveationMask) -> Result<EvalReport> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::dim("evaluate_pair", format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    Ok(EvalReport {
        seam_a: seam_energy(a, mask)?,
        seam_b: seam_energy(b, mask)?,
        psnr_down: psnr(&a.down2()?, &b.down2()?),
        seconds_a: None,
        seconds_b: None,
    })
}

/// PSNR for images in [-1, 1] (peak-to-peak range 2), capped at [`PSNR_CAP`].
pub fn psnr(a: &Image<f64>, b: &Image<f64>) -> f64 {
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (4.0 / mse).log10()).min(PSNR_CAP)
}

/// How far the matched rings sit from the boundary, in pixels.
const RING_OFFSET: isize = 4;

/// Mean absolute difference across pixel pairs that straddle the mask boundary
/// (a 2 px ring, one pixel each side), minus the same statistic on the pairs
/// shifted `RING_OFFSET` px further into either region. Uses frame 0 of `mask`.
pub fn seam_energy(img: &Image<f64>, mask: &FoveationMask) -> Result<f64> {
    let (h, w) = (img.height, img.width);
    if h % mask.height() != 0 || w % mask.width() != 0 || h / mask.height() != w / mask.width() {
        return Err(Error::dim("seam_energy", format!("{h}x{w} image for a {}x{} mask", mask.height(), mask.width())));
    }
    let inside = pixel_mask(mask, 0, h / mask.height());
    let at = |y: isize, x: isize| -> Option<bool> {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| inside[y as usize * w + x as usize])
    };
    let diff = |y0: isize, x0: isize, y1: isize, x1: isize| -> f64 {
        (0..3).map(|c| (img.at(c, y0 as usize, x0 as usize) - img.at(c, y1 as usize, x1 as usize)).abs()).sum::<f64>() / 3.0
    };
    let (mut seam, mut ns) = (0.0, 0usize);
    let (mut base, mut nb) = (0.0, 0usize);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for (dy, dx) in [(0isize, 1isize), (1, 0)] {
                let (a, b) = (at(y, x), at(y + dy, x + dx));
                let (Some(a), Some(b)) = (a, b) else { continue };
                if a == b {
                    continue;
                }
                seam += diff(y, x, y + dy, x + dx);
                ns += 1;
                // step away from the boundary on both sides; keep pairs that stay in one region
                for s in [-RING_OFFSET, RING_OFFSET] {
                    let (y0, x0, y1, x1) = (y + s * dy, x + s * dx, y + dy + s * dy, x + dx + s * dx);
                    if let (Some(p), Some(q)) = (at(y0, x0), at(y1, x1)) {
                        if p == q {
                            base += diff(y0, x0, y1, x1);
                            nb += 1;
                        }
                    }
                }
            }
        }
    }
    if ns == 0 {
        return Ok(0.0);
    }
    let base = if nb == 0 { 0.0 } else { base / nb as f64 };
    Ok(seam / ns as f64 - base)
}

#[cfg(test)]
mod tests;
