//! Flow-matching training on foveated targets, plus the full-resolution baseline.

mod checkpoint;
mod data;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, MAGIC, VERSION};
pub use data::{class_of, generate_sample, pan_clip, render, saliency_map, Sample, SyntheticClass, SyntheticSpec, NUM_CLASSES};

use crate::error::{Error, Result};
use crate::mask::{from_bboxes, from_saliency, make_circle, make_trajectory, ControlPoint, FoveationMask};
use crate::model::{DiT, DiTConfig};
use crate::numerics::{Adam, AdamConfig, Graph, Real, Tensor};
use crate::tokenizer::{merge, CodecConfig, FoveatedSequence, Image, LatentGrid, LatentNorm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    #[default]
    Randomized,
    Saliency,
    Bbox,
    /// All-ones masks: plain full-resolution training.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub strategy: MaskStrategy,
    /// Circle radius range as a fraction of `min(h, w)` of the latent grid.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Block-budget range for the saliency strategy.
    pub budget_min: f64,
    pub budget_max: f64,
    pub seed: u64,
    pub data: SyntheticSpec,
    /// Frames per training clip; above 1 each sample becomes a panning clip.
    pub frames: usize,
    pub norm_samples: usize,
    /// Write an intermediate checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            strategy: MaskStrategy::Randomized,
            radius_min: 0.25,
            radius_max: 0.6,
            budget_min: 0.2,
            budget_max: 0.6,
            seed: 0,
            data: SyntheticSpec::default(),
            frames: 1,
            norm_samples: 1024,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.frames == 0 || self.data.height == 0 || self.data.width == 0 || self.data.size == 0 {
            return Err(Error::invalid("batch size and dataset extents must be positive"));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("optimizer hyperparameters out of range"));
        }
        if !(0.0 <= self.radius_min && self.radius_min <= self.radius_max) {
            return Err(Error::invalid("radius range must satisfy 0 <= min <= max"));
        }
        if !(0.0 < self.budget_min && self.budget_min <= self.budget_max && self.budget_max <= 1.0) {
            return Err(Error::invalid("saliency budget range must lie in (0, 1]"));
        }
        if self.norm_samples == 0 {
            return Err(Error::invalid("norm_samples must be positive"));
        }
        Ok(())
    }
}

/// `merge(E(x), E(down2(x)), M)` with latent normalization applied; one image per frame.
pub fn foveated_target<F: Real>(
    frames: &[Image<F>],
    mask: &FoveationMask,
    codec: &CodecConfig,
    norm: &LatentNorm,
) -> Result<FoveatedSequence<F>> {
    let first = frames.first().ok_or_else(|| Error::invalid("no frames"))?;
    let (h, w) = codec.latent_extents(first.height, first.width)?;
    if (mask.frames(), mask.height(), mask.width()) != (frames.len(), h, w) {
        return Err(Error::dim(
            "foveated_target",
            format!("mask {}x{}x{} for {} frames of {h}x{w} latents", mask.frames(), mask.height(), mask.width(), frames.len()),
        ));
    }
    let hr = codec.encode(frames)?;
    let lows = frames.iter().map(|x| x.down2()).collect::<Result<Vec<_>>>()?;
    let lr = codec.encode_low(&lows)?;
    let mut seq = merge(&hr, &lr, mask)?;
    norm.normalize(&mut seq.tokens);
    Ok(seq)
}

/// Per-channel constants from the HR and LR latents of the first `n` samples.
pub fn fit_norm(spec: &SyntheticSpec, codec: &CodecConfig, seed: u64, n: usize) -> Result<LatentNorm> {
    let mut grids: Vec<LatentGrid<f64>> = Vec::with_capacity(2 * n);
    for i in 0..n as u64 {
        let s = generate_sample(spec, seed, i);
        grids.push(codec.encode(std::slice::from_ref(&s.image))?);
        grids.push(codec.encode_low(&[s.image.down2()?])?);
    }
    LatentNorm::fit(&grids)
}

/// Draws one training mask for `config.frames` frames of a `h × w` latent grid.
/// Multi-frame randomized masks follow a trajectory through up to three random
/// control points; the other strategies repeat one frame.
pub fn draw_mask(
    config: &TrainConfig,
    sample: &Sample,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FoveationMask> {
    let f = config.frames;
    if f > 1 && config.strategy == MaskStrategy::Randomized {
        let n = f.min(3);
        let points: Vec<ControlPoint> = (0..n)
            .map(|i| ControlPoint {
                frame: i * (f - 1) / (n - 1),
                cy: rng.gen_range(0.0..h as f64),
                cx: rng.gen_range(0.0..w as f64),
                r: rng.gen_range(config.radius_min..=config.radius_max) * h.min(w) as f64,
            })
            .collect();
        return make_trajectory(f, h, w, &points);
    }
    let single = draw_frame_mask(config, sample, h, w, rng)?;
    FoveationMask::stack(&vec![single; f])
}

fn draw_frame_mask(
    config: &TrainConfig,
    sample: &Sample,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FoveationMask> {
    match config.strategy {
        MaskStrategy::None => FoveationMask::all_ones(1, h, w),
        MaskStrategy::Randomized => {
            let r = rng.gen_range(config.radius_min..=config.radius_max) * h.min(w) as f64;
            let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
            make_circle(h, w, (cy, cx), r)
        }
        MaskStrategy::Saliency => {
            let budget = rng.gen_range(config.budget_min..=config.budget_max);
            from_saliency(&sample.saliency, h, w, budget)
        }
        MaskStrategy::Bbox => {
            let boxes: Vec<_> = (0..rng.gen_range(1..=2))
                .map(|_| {
                    let bh = ((rng.gen_range(config.radius_min..=config.radius_max) * h as f64).round() as usize).clamp(1, h);
                    let bw = ((rng.gen_range(config.radius_min..=config.radius_max) * w as f64).round() as usize).clamp(1, w);
                    let (y0, x0) = (rng.gen_range(0..=h - bh), rng.gen_range(0..=w - bw));
                    (y0, x0, y0 + bh, x0 + bw)
                })
                .collect();
            Ok(from_bboxes(h, w, &boxes)?.0)
        }
    }
}

/// One batch element, fully determined before any model evaluation.
struct Example {
    z0: FoveatedSequence<f32>,
    noise: Tensor<f32>,
    t: f64,
    class_id: usize,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: DiT<f32>,
    pub adam: Adam<f32>,
    pub norm: LatentNorm,
    /// Optimizer steps completed.
    pub step: u64,
    /// Where to write the state dump if a non-finite loss appears.
    pub dump_path: Option<PathBuf>,
}

const STEP_SALT: u64 = 0x7a11_5eed;

impl Trainer {
    pub fn new(config: TrainConfig, model_config: DiTConfig) -> Result<Self> {
        config.validate()?;
        let norm = fit_norm(&config.data, &model_config.codec, config.seed, config.norm_samples)?;
        let model = DiT::new(model_config, config.seed)?;
        let adam = Adam::new(config.adam(), &model.params);
        Ok(Self { config, model, adam, norm, step: 0, dump_path: None })
    }

    /// Continues from a checkpoint; `config` supplies the step budget and data settings.
    pub fn resume(checkpoint: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if checkpoint.moments.is_none() && checkpoint.meta.step > 0 {
            return Err(Error::invalid("checkpoint has no optimizer state to resume from"));
        }
        let model = checkpoint.model()?;
        let adam = checkpoint.adam(config.adam());
        Ok(Self {
            config,
            model,
            adam,
            norm: checkpoint.meta.norm.clone(),
            step: checkpoint.meta.step,
            dump_path: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                model: self.model.config.clone(),
                norm: self.norm.clone(),
                train: self.config.clone(),
                step: self.step,
            },
            params: self.model.params.clone(),
            moments: Some((self.adam.m.clone(), self.adam.v.clone())),
        }
    }

    fn examples(&self, step: u64) -> Result<Vec<Example>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ STEP_SALT);
        rng.set_stream(step);
        let codec = self.model.config.codec;
        let (h, w) = codec.latent_extents(self.config.data.height, self.config.data.width)?;
        let mut out = Vec::with_capacity(self.config.batch);
        for _ in 0..self.config.batch {
            let index = rng.gen_range(0..self.config.data.size as u64);
            let sample = generate_sample(&self.config.data, self.config.seed, index);
            let mask = draw_mask(&self.config, &sample, h, w, &mut rng)?;
            let t: f64 = rng.gen();
            let clip = pan_clip(&sample.image, self.config.frames);
            let z0 = foveated_target(&clip, &mask, &codec, &self.norm)?;
            let z0 = FoveatedSequence::new(z0.layout.clone(), z0.tokens.cast::<f32>())?;
            let noise = Tensor::from_fn(z0.tokens.shape(), |_| rng.sample::<f32, _>(StandardNormal));
            out.push(Example { z0, noise, t, class_id: sample.class_id });
        }
        Ok(out)
    }

    /// One optimizer step; returns the batch-mean loss.
    pub fn step_once(&mut self) -> Result<f32> {
        let examples = self.examples(self.step)?;
        let model = &self.model;
        let results: Vec<Result<(f32, Vec<Tensor<f32>>)>> = examples
            .par_iter()
            .map(|ex| {
                let plan = model.plan(&ex.z0.layout)?;
                let mut g = Graph::new();
                let loss = model.loss_graph(&mut g, &ex.z0.tokens, &ex.noise, ex.t, ex.class_id, &plan)?;
                let mut bufs = model.params.grad_buffers();
                g.backward_into(loss, &mut bufs)?;
                Ok((g.value(loss).data()[0], bufs))
            })
            .collect();
        self.model.params.zero_grad();
        let scale = 1.0 / self.config.batch as f32;
        let mut total = 0.0f32;
        for r in results {
            let (loss, bufs) = r?;
            total += loss;
            self.model.params.accumulate(&bufs, scale)?;
        }
        let mean = total * scale;
        let grads_finite = self.model.params.iter().all(|p| p.grad.is_finite());
        if !mean.is_finite() || !grads_finite {
            return Err(self.non_finite(mean));
        }
        self.adam.update(&mut self.model.params);
        self.step += 1;
        Ok(mean)
    }

    fn non_finite(&self, loss: f32) -> Error {
        let mut msg = format!("non-finite loss {loss} at step {}", self.step);
        if let Some(path) = &self.dump_path {
            match self.checkpoint().save(path) {
                Ok(()) => msg.push_str(&format!("; state dumped to {}", path.display())),
                Err(e) => msg.push_str(&format!("; state dump failed: {e}")),
            }
        }
        Error::NonFinite(msg)
    }

    /// Runs until `config.steps` steps have been taken, calling `on_step(step, loss)`
    /// after each. Returns the `(step, loss)` trace of this call.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, u64, f32) -> Result<()>) -> Result<Vec<(u64, f32)>> {
        let mut trace = Vec::new();
        while self.step < self.config.steps {
            let loss = self.step_once()?;
            trace.push((self.step, loss));
            on_step(self, self.step, loss)?;
        }
        Ok(trace)
    }
}

/// Median of a slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests;
