//! Pixel ↔ latent ↔ foveated-sequence conversions.
//!
//! The codec is an exact space-to-depth patchify: latent cell `(y, x)` holds
//! the `p × p × 3` pixel block at `(p*y, p*x)`, channel `(color*p + py)*p + px`.
//! A foveated sequence stores HR latent tokens where the mask is set and one
//! token of the half-resolution latent for every all-LR 2×2 block.

mod image;
mod layout;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use image::{cubic_kernel, Image, UpMode, BICUBIC_A};
pub use layout::{TokenClass, TokenLayout, TokenPos};

use crate::error::{Error, Result};
use crate::mask::FoveationMask;
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub patch: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { patch: 4 }
    }
}

impl CodecConfig {
    /// Spatial downsampling factor between the HR and LR grids.
    pub const DOWNSAMPLE: usize = 2;

    pub fn channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Latent extents for an `H × W` image; both must be even multiples of the patch.
    pub fn latent_extents(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.patch;
        if p == 0 || !height.is_multiple_of(2 * p) || !width.is_multiple_of(2 * p) || height == 0 || width == 0 {
            return Err(Error::dim(
                "encode",
                format!("{height}x{width} is not divisible by {} (2 x patch)", 2 * p),
            ));
        }
        Ok((height / p, width / p))
    }

    pub fn encode<F: Real>(&self, frames: &[Image<F>]) -> Result<LatentGrid<F>> {
        let first = frames.first().ok_or_else(|| Error::invalid("no frames to encode"))?;
        let (h, w) = self.latent_extents(first.height, first.width)?;
        self.patchify(frames, h, w)
    }

    /// Encodes a half-resolution image (whose latent extents need not be even).
    pub fn encode_low<F: Real>(&self, frames: &[Image<F>]) -> Result<LatentGrid<F>> {
        let first = frames.first().ok_or_else(|| Error::invalid("no frames to encode"))?;
        let p = self.patch;
        if first.height % p != 0 || first.width % p != 0 {
            return Err(Error::dim("encode", format!("{}x{} not divisible by {p}", first.height, first.width)));
        }
        self.patchify(frames, first.height / p, first.width / p)
    }

    fn patchify<F: Real>(&self, frames: &[Image<F>], h: usize, w: usize) -> Result<LatentGrid<F>> {
        let p = self.patch;
        let c = self.channels();
        let f = frames.len();
        let mut grid = LatentGrid::zeros(c, f, h, w);
        for (t, img) in frames.iter().enumerate() {
            if img.height != h * p || img.width != w * p {
                return Err(Error::dim("encode", "frames have different extents"));
            }
            for color in 0..3 {
                for py in 0..p {
                    for px in 0..p {
                        let ch = (color * p + py) * p + px;
                        for y in 0..h {
                            for x in 0..w {
                                grid.set(ch, t, y, x, img.at(color, p * y + py, p * x + px));
                            }
                        }
                    }
                }
            }
        }
        Ok(grid)
    }

    pub fn decode<F: Real>(&self, grid: &LatentGrid<F>) -> Result<Vec<Image<F>>> {
        let p = self.patch;
        if grid.channels != self.channels() {
            return Err(Error::dim(
                "decode",
                format!("expected {} channels, got {}", self.channels(), grid.channels),
            ));
        }
        let mut out = Vec::with_capacity(grid.frames);
        for t in 0..grid.frames {
            let mut img = Image::zeros(grid.height * p, grid.width * p);
            for color in 0..3 {
                for py in 0..p {
                    for px in 0..p {
                        let ch = (color * p + py) * p + px;
                        for y in 0..grid.height {
                            for x in 0..grid.width {
                                *img.at_mut(color, p * y + py, p * x + px) = grid.get(ch, t, y, x);
                            }
                        }
                    }
                }
            }
            out.push(img);
        }
        Ok(out)
    }
}

/// Dense latent array, logically `c × f × h × w` and stored in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid<F> {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<F>,
}

impl<F: Real> LatentGrid<F> {
    pub fn zeros(channels: usize, frames: usize, height: usize, width: usize) -> Self {
        Self { channels, frames, height, width, data: vec![F::zero(); channels * frames * height * width] }
    }

    #[inline]
    fn idx(&self, c: usize, t: usize, y: usize, x: usize) -> usize {
        ((c * self.frames + t) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, y: usize, x: usize) -> F {
        self.data[self.idx(c, t, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, t: usize, y: usize, x: usize, v: F) {
        let i = self.idx(c, t, y, x);
        self.data[i] = v;
    }

    pub fn token(&self, t: usize, y: usize, x: usize) -> Vec<F> {
        (0..self.channels).map(|c| self.get(c, t, y, x)).collect()
    }

    /// All cells as an `(f*h*w) × c` token matrix in row-major cell order.
    pub fn to_tokens(&self) -> Tensor<F> {
        let n = self.frames * self.height * self.width;
        let mut data = Vec::with_capacity(n * self.channels);
        for t in 0..self.frames {
            for y in 0..self.height {
                for x in 0..self.width {
                    for c in 0..self.channels {
                        data.push(self.get(c, t, y, x));
                    }
                }
            }
        }
        Tensor::new(&[n, self.channels], data).expect("consistent extents")
    }
}

/// Latent grid where only some cells carry data; the rest are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrid<F> {
    pub grid: LatentGrid<F>,
    /// One flag per `(t, y, x)` cell.
    pub valid: Vec<bool>,
}

/// Variable-length token matrix (`L × c`) plus the layout that indexes it.
#[derive(Clone, Debug, PartialEq)]
pub struct FoveatedSequence<F> {
    pub layout: Arc<TokenLayout>,
    pub tokens: Tensor<F>,
}

impl<F: Real> FoveatedSequence<F> {
    pub fn new(layout: Arc<TokenLayout>, tokens: Tensor<F>) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != layout.len() {
            return Err(Error::dim(
                "sequence",
                format!("tokens {:?} for layout of length {}", tokens.shape(), layout.len()),
            ));
        }
        Ok(Self { layout, tokens })
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }
}

pub fn merge<F: Real>(hr: &LatentGrid<F>, lr: &LatentGrid<F>, mask: &FoveationMask) -> Result<FoveatedSequence<F>> {
    merge_with_layout(hr, lr, Arc::new(TokenLayout::new(mask)?))
}

/// Gathers HR tokens at mask cells and LR tokens at all-LR blocks, in layout order.
pub fn merge_with_layout<F: Real>(
    hr: &LatentGrid<F>,
    lr: &LatentGrid<F>,
    layout: Arc<TokenLayout>,
) -> Result<FoveatedSequence<F>> {
    let (f, h, w) = (layout.frames(), layout.height(), layout.width());
    if (hr.frames, hr.height, hr.width) != (f, h, w) {
        return Err(Error::dim(
            "merge",
            format!("HR grid {}x{}x{} vs mask {f}x{h}x{w}", hr.frames, hr.height, hr.width),
        ));
    }
    if (lr.frames, lr.height, lr.width) != (f, h / 2, w / 2) || lr.channels != hr.channels {
        return Err(Error::dim("merge", "LR grid must be half the HR grid with the same channels"));
    }
    let c = hr.channels;
    let mut data = Vec::with_capacity(layout.len() * c);
    for e in layout.entries() {
        let src = match e.class {
            TokenClass::Hr => hr,
            TokenClass::Lr => lr,
        };
        for ch in 0..c {
            data.push(src.get(ch, e.frame, e.y, e.x));
        }
    }
    let tokens = Tensor::new(&[layout.len(), c], data)?;
    FoveatedSequence::new(layout, tokens)
}

/// Scatters a sequence back onto sparse HR and LR grids.
pub fn split<F: Real>(seq: &FoveatedSequence<F>) -> (SparseGrid<F>, SparseGrid<F>) {
    let layout = &seq.layout;
    let (f, h, w) = (layout.frames(), layout.height(), layout.width());
    let c = seq.channels();
    let mut hr = SparseGrid { grid: LatentGrid::zeros(c, f, h, w), valid: vec![false; f * h * w] };
    let mut lr = SparseGrid {
        grid: LatentGrid::zeros(c, f, h / 2, w / 2),
        valid: vec![false; f * (h / 2) * (w / 2)],
    };
    for (i, e) in layout.entries().iter().enumerate() {
        let row = seq.tokens.row(i);
        let dst = match e.class {
            TokenClass::Hr => &mut hr,
            TokenClass::Lr => &mut lr,
        };
        for (ch, &v) in row.iter().enumerate() {
            dst.grid.set(ch, e.frame, e.y, e.x, v);
        }
        let (gh, gw) = (dst.grid.height, dst.grid.width);
        dst.valid[(e.frame * gh + e.y) * gw + e.x] = true;
    }
    (hr, lr)
}

/// Pixel-resolution mask `M'` (nearest upsampling of one mask frame by `scale`).
pub fn pixel_mask(mask: &FoveationMask, frame: usize, scale: usize) -> Vec<bool> {
    let (h, w) = (mask.height() * scale, mask.width() * scale);
    (0..h * w).map(|i| mask.get(frame, i / w / scale, i % w / scale)).collect()
}

/// Composites one frame: `M' ⊙ x_high + (1 − M') ⊙ Up(x_low)`.
///
/// `low_valid` flags pixels of the half-resolution image that were decoded
/// from real LR tokens. Holes (under the fovea) are filled with the bicubic
/// downsample of `x_high`, whose own holes are first filled from `x_low` by
/// nearest upsampling. The filled low image is upsampled bilinearly.
pub fn blend<F: Real>(
    x_high: &Image<F>,
    x_low: &Image<F>,
    low_valid: &[bool],
    mask: &FoveationMask,
    frame: usize,
) -> Result<Image<F>> {
    let (h, w) = (x_high.height, x_high.width);
    if x_low.height * 2 != h || x_low.width * 2 != w || low_valid.len() != x_low.height * x_low.width {
        return Err(Error::dim("blend", "low image must be exactly half the high image"));
    }
    if h % mask.height() != 0 || w % mask.width() != 0 || h / mask.height() != w / mask.width() || frame >= mask.frames() {
        return Err(Error::dim("blend", "mask does not tile the image"));
    }
    let mp = pixel_mask(mask, frame, h / mask.height());
    let lw = x_low.width;

    let lh = x_low.height;
    // Pass 1 estimates the periphery HR pixels by nearest replication of x_low;
    // pass 2 re-estimates them from the bilinear upsample of the pass-1 result.
    let mut estimate = x_low.up2(UpMode::Nearest);
    let mut low_filled = x_low.clone();
    for pass in 0..2 {
        let mut high_filled = x_high.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    if !mp[y * w + x] {
                        *high_filled.at_mut(c, y, x) = estimate.at(c, y, x);
                    }
                }
            }
        }
        let fill = high_filled.down2()?;
        for c in 0..3 {
            for y in 0..lh {
                for x in 0..lw {
                    if !low_valid[y * lw + x] {
                        *low_filled.at_mut(c, y, x) = fill.at(c, y, x);
                    }
                }
            }
        }
        if pass == 0 {
            estimate = low_filled.up2(UpMode::Bilinear);
        }
    }
    let up = low_filled.up2(UpMode::Bilinear);
    Ok(Image::from_fn(h, w, |c, y, x| if mp[y * w + x] { x_high.at(c, y, x) } else { up.at(c, y, x) }))
}

/// Decodes a clean sequence to pixels: split, decode both grids, blend per frame.
pub fn decode_sequence<F: Real>(codec: &CodecConfig, seq: &FoveatedSequence<F>) -> Result<Vec<Image<F>>> {
    let (hr, lr) = split(seq);
    let highs = codec.decode(&hr.grid)?;
    let lows = codec.decode(&lr.grid)?;
    let p = codec.patch;
    let mask = seq.layout.mask();
    let (lh, lw) = (lr.grid.height, lr.grid.width);
    let mut out = Vec::with_capacity(highs.len());
    for (t, (xh, xl)) in highs.iter().zip(&lows).enumerate() {
        let (ph, pw) = (xl.height, xl.width);
        let valid: Vec<bool> = (0..ph * pw)
            .map(|i| lr.valid[(t * lh + i / pw / p) * lw + i % pw / p])
            .collect();
        out.push(blend(xh, xl, &valid, mask, t)?);
    }
    Ok(out)
}

/// Per-channel affine latent normalization `(z - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentNorm {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Mean and (population) standard deviation per channel over all cells.
    pub fn fit<F: Real>(grids: &[LatentGrid<F>]) -> Result<Self> {
        let c = grids.first().ok_or_else(|| Error::invalid("no grids to fit"))?.channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for g in grids {
            let cells = g.frames * g.height * g.width;
            for ch in 0..c {
                for v in &g.data[ch * cells..(ch + 1) * cells] {
                    let v = v.to_f64().unwrap();
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            n += cells;
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / nf - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize<F: Real>(&self, tokens: &mut Tensor<F>) {
        let c = tokens.cols();
        for row in tokens.data_mut().chunks_mut(c) {
            for (ch, v) in row.iter_mut().enumerate() {
                *v = (*v - F::lit(self.mean[ch])) / F::lit(self.std[ch]);
            }
        }
    }

    pub fn denormalize<F: Real>(&self, tokens: &mut Tensor<F>) {
        let c = tokens.cols();
        for row in tokens.data_mut().chunks_mut(c) {
            for (ch, v) in row.iter_mut().enumerate() {
                *v = *v * F::lit(self.std[ch]) + F::lit(self.mean[ch]);
            }
        }
    }
}
