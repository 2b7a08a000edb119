//! Analytic FLOP counts and wall-clock measurement of one forward pass versus
//! token ratio.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::initial_noise;
use crate::mask::FoveationMask;
use crate::model::{DiT, DiTConfig};
use crate::numerics::ParamStore;
use crate::tokenizer::{FoveatedSequence, TokenLayout};

/// Multiply-add counts (2 per MAC) for one forward pass on one layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub hr_attention: u64,
    pub lr_attention: u64,
    pub mlp: u64,
    pub projections: u64,
    /// Patch embedding, output head and conditioning.
    pub embedding: u64,
    pub total: u64,
}

pub fn predict_flops(layout: &TokenLayout, config: &DiTConfig) -> FlopCount {
    let l = layout.len() as u64;
    let m = layout.hr_count() as u64;
    let blocks = (layout.frames() * layout.height() * layout.width() / 4) as u64;
    let (d, heads) = (config.attention().head_dim as u64, config.heads as u64);
    let w = config.width as u64;
    let depth = config.depth as u64;
    let c = config.channels() as u64;

    // QK^T and AV: two products per (query, key) pair per head
    let hr_attention = depth * 2 * m * l * d * heads * 2;
    let lr_attention = depth * 2 * (l - m) * blocks * d * heads * 2;
    let mlp = depth * l * 2 * w * (config.mlp_ratio as u64 * w) * 2;
    let projections = depth * (2 * l * w * 3 * w + 2 * l * w * w);
    let td = config.time_dim as u64;
    let cond = 2 * td * w + 2 * w * w + depth * 2 * w * 6 * w + 2 * w * 2 * w;
    let embedding = 2 * l * c * w + 2 * l * w * c + cond;
    FlopCount {
        hr_attention,
        lr_attention,
        mlp,
        projections,
        embedding,
        total: hr_attention + lr_attention + mlp + projections + embedding,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub m: usize,
    pub len: usize,
    pub ratio: f64,
    pub flops: u64,
    /// Seconds per forward pass.
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    /// Median of the zero-depth forward on the same layout.
    pub overhead: f64,
    pub speedup: f64,
    pub corrected_speedup: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub threads: usize,
    pub warmup: usize,
    pub reps: usize,
    /// Calls per timed sample, raised when one call is too short for the timer.
    pub calls_per_sample: Vec<usize>,
    pub rows: Vec<BenchRow>,
    /// Least-squares seconds per FLOP of overhead-corrected time (through the origin).
    pub fit_scale: f64,
    /// Relative RMS residual of that fit.
    pub fit_residual: f64,
}

pub const WARMUP: usize = 3;
pub const MIN_REPS: usize = 20;

/// Times `f` `reps` times after `WARMUP` calls. When a single call is shorter than
/// 100× the timer's resolution, each sample times a batch of calls instead.
fn time_calls(mut f: impl FnMut() -> Result<()>, reps: usize, resolution: f64) -> Result<(Vec<f64>, usize)> {
    for _ in 0..WARMUP {
        f()?;
    }
    let start = Instant::now();
    f()?;
    let once = start.elapsed().as_secs_f64().max(1e-12);
    let per = ((100.0 * resolution / once).ceil() as usize).max(1);
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for _ in 0..per {
            f()?;
        }
        samples.push(start.elapsed().as_secs_f64() / per as f64);
    }
    Ok((samples, per))
}

/// Smallest observable non-zero step of `Instant`.
pub fn timer_resolution() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_secs_f64());
    }
    best
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// The same model with every transformer block removed.
pub fn zero_depth(model: &DiT<f32>) -> Result<DiT<f32>> {
    let mut params = ParamStore::new();
    for p in model.params.iter().filter(|p| !p.name.starts_with("block")) {
        params.add(p.name.clone(), p.value.clone());
    }
    DiT::from_params(DiTConfig { depth: 0, ..model.config.clone() }, params)
}

/// Times one forward pass per layout. The first layout is the speedup reference
/// and is normally the all-ones mask.
pub fn measure(model: &DiT<f32>, layouts: &[(String, FoveationMask)], reps: usize, threads: usize) -> Result<BenchReport> {
    if layouts.is_empty() {
        return Err(Error::invalid("no layouts to measure"));
    }
    let reps = reps.max(MIN_REPS);
    let bare = zero_depth(model)?;
    let resolution = timer_resolution();
    let mut rows = Vec::with_capacity(layouts.len());
    let mut calls = Vec::with_capacity(layouts.len());
    for (i, (label, mask)) in layouts.iter().enumerate() {
        let layout = Arc::new(TokenLayout::new(mask)?);
        let z = FoveatedSequence::new(layout.clone(), initial_noise::<f32>(layout.len(), model.config.channels(), i as u64))?;
        let plan = model.plan(&layout)?;
        let bare_plan = bare.plan(&layout)?;
        let (mut full, per) = time_calls(|| model.forward_with_plan(&z, 0.5, 0, &plan).map(|_| ()), reps, resolution)?;
        let (mut over, _) = time_calls(|| bare.forward_with_plan(&z, 0.5, 0, &bare_plan).map(|_| ()), reps, resolution)?;
        full.sort_by(f64::total_cmp);
        over.sort_by(f64::total_cmp);
        let cells = mask.frames() * mask.height() * mask.width();
        rows.push(BenchRow {
            label: label.clone(),
            m: layout.hr_count(),
            len: layout.len(),
            ratio: layout.len() as f64 / cells as f64,
            flops: predict_flops(&layout, &model.config).total,
            median: percentile(&full, 0.5),
            p10: percentile(&full, 0.1),
            p90: percentile(&full, 0.9),
            overhead: percentile(&over, 0.5),
            speedup: 0.0,
            corrected_speedup: 0.0,
        });
        calls.push(per);
    }
    let (ref_t, ref_o) = (rows[0].median, rows[0].overhead);
    for r in &mut rows {
        r.speedup = ref_t / r.median;
        r.corrected_speedup = (ref_t - ref_o) / (r.median - r.overhead);
    }
    let (scale, residual) = fit_through_origin(
        &rows.iter().map(|r| r.flops as f64).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.median - r.overhead).collect::<Vec<_>>(),
    );
    Ok(BenchReport { threads, warmup: WARMUP, reps, calls_per_sample: calls, rows, fit_scale: scale, fit_residual: residual })
}

/// `y ≈ s·x` by least squares; returns `s` and the relative RMS residual.
pub fn fit_through_origin(x: &[f64], y: &[f64]) -> (f64, f64) {
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let s = sxy / sxx;
    let rel = x.iter().zip(y).map(|(a, b)| ((s * a - b) / b).powi(2)).sum::<f64>() / x.len() as f64;
    (s, rel.sqrt())
}

impl BenchReport {
    /// Adjacent rows ordered by ratio (descending) keep non-increasing speedup,
    /// within `tolerance` relative noise.
    pub fn speedup_monotone(&self, tolerance: f64) -> bool {
        let mut rows: Vec<&BenchRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.ratio.total_cmp(&a.ratio));
        rows.windows(2).all(|p| p[1].speedup >= p[0].speedup * (1.0 - tolerance))
    }

    /// Every adjacent pair (by ratio) orders predicted FLOPs and measured time the same way.
    pub fn flop_order_agrees(&self) -> bool {
        let mut rows: Vec<&BenchRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.ratio.total_cmp(&a.ratio));
        rows.windows(2).all(|p| (p[0].flops > p[1].flops) == (p[0].median > p[1].median))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# one forward pass at t=0.5, batch 1; threads={}; {} warmup calls then {} timed samples; overhead = zero-depth forward",
            self.threads, self.warmup, self.reps
        );
        let _ = writeln!(s, "# fit: seconds = {:.6e} * flops, relative rms residual {:.4}", self.fit_scale, self.fit_residual);
        s.push_str("label,m,L,ratio,flops,median_s,p10_s,p90_s,overhead_s,speedup,corrected_speedup\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.4},{:.4}",
                r.label, r.m, r.len, r.ratio, r.flops, r.median, r.p10, r.p90, r.overhead, r.speedup, r.corrected_speedup
            );
        }
        s
    }
}
