//! Foveation masks over the latent token grid.
//!
//! A mask marks latent cells that keep a high-resolution (HR) token. Masks are
//! always aligned to 2×2 blocks: each block is either four HR tokens or one
//! low-resolution (LR) token. Constructors quantize geometry to blocks with
//! the "any covered cell" rule, so a block is HR as soon as one of its cells
//! falls inside the shape.

mod spline;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use spline::NaturalSpline;

use crate::error::{Error, Result};
use crate::pnm::{self, Gray8};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FoveationMask {
    frames: usize,
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

/// Token accounting for a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqStats {
    /// HR token count (summed over frames).
    pub m: usize,
    /// Sequence length `m + (h*w - m)/4`, summed over frames.
    pub l: usize,
    /// `l / (f*h*w)`.
    pub ratio: f64,
    pub per_frame_m: Vec<usize>,
    pub per_frame_l: Vec<usize>,
}

fn check_extents(frames: usize, h: usize, w: usize) -> Result<()> {
    if frames == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("mask extents must be positive, got {frames}x{h}x{w}")));
    }
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(Error::invalid(format!("mask extents must be even, got {h}x{w}")));
    }
    Ok(())
}

impl FoveationMask {
    /// Wraps an explicit bit grid (`frames × h × w`, row-major) after checking
    /// block alignment.
    pub fn new(frames: usize, height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        check_extents(frames, height, width)?;
        if bits.len() != frames * height * width {
            return Err(Error::invalid("mask bit count does not match extents"));
        }
        let m = Self { frames, height, width, bits };
        m.validate()?;
        Ok(m)
    }

    pub fn all_ones(frames: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(frames, height, width, vec![true; frames * height * width])
    }

    pub fn all_zeros(frames: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(frames, height, width, vec![false; frames * height * width])
    }

    /// Block-quantizes an arbitrary cell predicate: a block is HR iff any of
    /// its four cells satisfies `inside`.
    pub fn from_cells(
        frames: usize,
        height: usize,
        width: usize,
        mut inside: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        check_extents(frames, height, width)?;
        let mut bits = vec![false; frames * height * width];
        for t in 0..frames {
            for by in 0..height / 2 {
                for bx in 0..width / 2 {
                    let hit = (0..4).any(|k| inside(t, 2 * by + k / 2, 2 * bx + k % 2));
                    if hit {
                        for k in 0..4 {
                            bits[(t * height + 2 * by + k / 2) * width + 2 * bx + k % 2] = true;
                        }
                    }
                }
            }
        }
        Ok(Self { frames, height, width, bits })
    }

    /// Block-level constructor: `block(t, by, bx)` decides each 2×2 block.
    pub fn from_blocks(
        frames: usize,
        height: usize,
        width: usize,
        mut block: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        Self::from_cells(frames, height, width, |t, y, x| {
            y % 2 == 0 && x % 2 == 0 && block(t, y / 2, x / 2)
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_extents(self.frames, self.height, self.width)?;
        for t in 0..self.frames {
            for by in 0..self.height / 2 {
                for bx in 0..self.width / 2 {
                    let v = self.get(t, 2 * by, 2 * bx);
                    let uniform = (0..4).all(|k| self.get(t, 2 * by + k / 2, 2 * bx + k % 2) == v);
                    if !uniform {
                        return Err(Error::invalid(format!(
                            "mask block ({by},{bx}) in frame {t} is not uniform"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> bool {
        self.bits[(t * self.height + y) * self.width + x]
    }

    /// Whether LR block `(by, bx)` of frame `t` is covered by HR tokens.
    pub fn block_is_hr(&self, t: usize, by: usize, bx: usize) -> bool {
        self.get(t, 2 * by, 2 * bx)
    }

    /// The mask of a single frame.
    pub fn frame(&self, t: usize) -> FoveationMask {
        let n = self.height * self.width;
        FoveationMask {
            frames: 1,
            height: self.height,
            width: self.width,
            bits: self.bits[t * n..(t + 1) * n].to_vec(),
        }
    }

    pub fn stack(frames: &[FoveationMask]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::invalid("no frames to stack"))?;
        let (h, w) = (first.height, first.width);
        let mut bits = Vec::new();
        for f in frames {
            if (f.height, f.width) != (h, w) {
                return Err(Error::invalid("frame extents differ"));
            }
            bits.extend_from_slice(&f.bits);
        }
        Self::new(bits.len() / (h * w), h, w, bits)
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// Cellwise containment: every HR cell of `other` is HR here.
    pub fn contains(&self, other: &FoveationMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    pub fn flip_horizontal(&self) -> FoveationMask {
        let mut out = self.clone();
        for t in 0..self.frames {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.bits[(t * self.height + y) * self.width + x] = self.get(t, y, self.width - 1 - x);
                }
            }
        }
        out
    }

    pub fn sequence_length(&self) -> SeqStats {
        let hw = self.height * self.width;
        let mut per_frame_m = Vec::with_capacity(self.frames);
        let mut per_frame_l = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let m = self.bits[t * hw..(t + 1) * hw].iter().filter(|&&b| b).count();
            per_frame_m.push(m);
            per_frame_l.push(m + (hw - m) / 4);
        }
        let m = per_frame_m.iter().sum();
        let l: usize = per_frame_l.iter().sum();
        SeqStats {
            m,
            l,
            ratio: l as f64 / (self.frames * hw) as f64,
            per_frame_m,
            per_frame_l,
        }
    }
}

/// Circle of radius `radius` around `center = (y, x)`, both in latent cell
/// units where cell `(i, j)` has its center at `(i + 0.5, j + 0.5)`. A cell is
/// inside when its center lies strictly within the radius.
pub fn make_circle(height: usize, width: usize, center: (f64, f64), radius: f64) -> Result<FoveationMask> {
    if !(center.0.is_finite() && center.1.is_finite() && radius.is_finite()) || radius < 0.0 {
        return Err(Error::invalid("circle parameters must be finite with non-negative radius"));
    }
    let r2 = radius * radius;
    FoveationMask::from_cells(1, height, width, |_, y, x| {
        let dy = y as f64 + 0.5 - center.0;
        let dx = x as f64 + 0.5 - center.1;
        dy * dy + dx * dx < r2
    })
}

/// Half-open rectangle `[y0, y1) × [x0, x1)` in latent cells.
pub fn make_rect(
    height: usize,
    width: usize,
    top_left: (usize, usize),
    bottom_right: (usize, usize),
) -> Result<FoveationMask> {
    let (y0, x0) = top_left;
    let (y1, x1) = bottom_right;
    if y1 > height || x1 > width || y0 > y1 || x0 > x1 {
        return Err(Error::invalid(format!(
            "rectangle ({y0},{x0})-({y1},{x1}) outside a {height}x{width} grid"
        )));
    }
    FoveationMask::from_cells(1, height, width, |_, y, x| y >= y0 && y < y1 && x >= x0 && x < x1)
}

pub fn union(masks: &[FoveationMask]) -> Result<FoveationMask> {
    let first = masks.first().ok_or_else(|| Error::invalid("union of zero masks"))?;
    let mut out = first.clone();
    for m in &masks[1..] {
        if (m.frames, m.height, m.width) != (out.frames, out.height, out.width) {
            return Err(Error::invalid("union operands have different extents"));
        }
        for (a, &b) in out.bits.iter_mut().zip(&m.bits) {
            *a |= b;
        }
    }
    out.validate()?;
    Ok(out)
}

/// Grayscale map with arbitrary resolution (row-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl GrayMap {
    pub fn from_gray8(g: &Gray8) -> Self {
        Self { height: g.height, width: g.width, values: g.data.iter().map(|&v| v as f64 / 255.0).collect() }
    }

    /// Area-weighted resampling onto an `h × w` grid.
    pub fn area_resample(&self, h: usize, w: usize) -> Vec<f64> {
        let wy = overlap_weights(self.height, h);
        let wx = overlap_weights(self.width, w);
        let mut out = vec![0.0; h * w];
        for (oy, row_w) in wy.iter().enumerate() {
            for (ox, col_w) in wx.iter().enumerate() {
                let mut acc = 0.0;
                let mut total = 0.0;
                for &(sy, fy) in row_w {
                    for &(sx, fx) in col_w {
                        acc += fy * fx * self.values[sy * self.width + sx];
                        total += fy * fx;
                    }
                }
                out[oy * w + ox] = acc / total;
            }
        }
        out
    }
}

/// For each of `dst` output cells, the source cells it overlaps and the overlap length.
fn overlap_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut v = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let a = lo.max(s as f64);
                let b = hi.min(s as f64 + 1.0);
                if b > a {
                    v.push((s, b - a));
                }
                s += 1;
            }
            v
        })
        .collect()
}

/// Keeps the `floor(budget * blocks)` 2×2 blocks with the highest mean
/// saliency. Ties go to the lower row-major block index.
pub fn from_saliency(map: &GrayMap, height: usize, width: usize, budget: f64) -> Result<FoveationMask> {
    check_extents(1, height, width)?;
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::invalid(format!("saliency budget must lie in (0, 1], got {budget}")));
    }
    if map.height == 0 || map.width == 0 || map.values.len() != map.height * map.width {
        return Err(Error::invalid("saliency map extents do not match its data"));
    }
    if map.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("saliency map contains NaN or infinity".into()));
    }
    let cells = map.area_resample(height, width);
    let (bh, bw) = (height / 2, width / 2);
    let mut scores: Vec<(usize, f64)> = (0..bh * bw)
        .map(|b| {
            let (by, bx) = (b / bw, b % bw);
            let s = (0..4).map(|k| cells[(2 * by + k / 2) * width + 2 * bx + k % 2]).sum::<f64>() / 4.0;
            (b, s)
        })
        .collect();
    // stable sort keeps row-major order among equal scores
    scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let keep = (budget * (bh * bw) as f64 + 1e-9).floor() as usize;
    let mut chosen = vec![false; bh * bw];
    for &(b, _) in scores.iter().take(keep) {
        chosen[b] = true;
    }
    FoveationMask::from_blocks(1, height, width, |_, by, bx| chosen[by * bw + bx])
}

/// Bounding box `(y0, x0, y1, x1)`, half-open, in latent cells.
pub type BBox = (usize, usize, usize, usize);

/// Union of box masks. Zero-area boxes are dropped; their indices are returned
/// alongside the mask.
pub fn from_bboxes(height: usize, width: usize, boxes: &[BBox]) -> Result<(FoveationMask, Vec<usize>)> {
    let mut masks = vec![FoveationMask::all_zeros(1, height, width)?];
    let mut dropped = Vec::new();
    for (i, &(y0, x0, y1, x1)) in boxes.iter().enumerate() {
        if y1 > height || x1 > width || y0 > y1 || x0 > x1 {
            return Err(Error::invalid(format!("box {i} ({y0},{x0},{y1},{x1}) outside the grid")));
        }
        if y0 == y1 || x0 == x1 {
            log::warn!("dropping zero-area box {i}");
            dropped.push(i);
            continue;
        }
        masks.push(make_rect(height, width, (y0, x0), (y1, x1))?);
    }
    Ok((union(&masks)?, dropped))
}

/// Gaze key point for a moving fovea.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub frame: usize,
    pub cy: f64,
    pub cx: f64,
    pub r: f64,
}

/// Per-frame circle masks whose center and radius follow natural cubic
/// splines through the control points (clamped outside their frame range).
pub fn make_trajectory(frames: usize, height: usize, width: usize, points: &[ControlPoint]) -> Result<FoveationMask> {
    check_extents(frames, height, width)?;
    if points.len() < 2 {
        return Err(Error::invalid("a trajectory needs at least two control points"));
    }
    for p in points {
        if p.frame >= frames || !(0.0..=height as f64).contains(&p.cy) || !(0.0..=width as f64).contains(&p.cx) || p.r < 0.0 || !p.r.is_finite() {
            return Err(Error::invalid(format!("control point {p:?} outside the {frames}x{height}x{width} volume")));
        }
    }
    let (cy, cx, r) = trajectory_splines(points)?;
    let per_frame = (0..frames)
        .map(|t| {
            let tf = t as f64;
            make_circle(height, width, (cy.eval(tf), cx.eval(tf)), r.eval(tf).max(0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    FoveationMask::stack(&per_frame)
}

/// Splines of `(cy, cx, r)` over frame index.
pub fn trajectory_splines(points: &[ControlPoint]) -> Result<(NaturalSpline, NaturalSpline, NaturalSpline)> {
    let xs: Vec<f64> = points.iter().map(|p| p.frame as f64).collect();
    let col = |f: fn(&ControlPoint) -> f64| points.iter().map(f).collect::<Vec<_>>();
    Ok((
        NaturalSpline::new(&xs, &col(|p| p.cy))?,
        NaturalSpline::new(&xs, &col(|p| p.cx))?,
        NaturalSpline::new(&xs, &col(|p| p.r))?,
    ))
}

/// Picks the `k` blocks closest to the grid center (ties row-major), where `k`
/// makes the token ratio as close as possible to `target`.
pub fn centered_for_ratio(height: usize, width: usize, target: f64) -> Result<FoveationMask> {
    check_extents(1, height, width)?;
    let (bh, bw) = (height / 2, width / 2);
    let nb = bh * bw;
    let hw = (height * width) as f64;
    // L = nb + 3k  (each HR block adds 3 tokens)
    let k = (((target * hw) - nb as f64) / 3.0).round().clamp(0.0, nb as f64) as usize;
    let (cy, cx) = (bh as f64 / 2.0, bw as f64 / 2.0);
    let mut order: Vec<(usize, f64)> = (0..nb)
        .map(|b| {
            let dy = (b / bw) as f64 + 0.5 - cy;
            let dx = (b % bw) as f64 + 0.5 - cx;
            (b, dy * dy + dx * dx)
        })
        .collect();
    order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let mut chosen = vec![false; nb];
    for &(b, _) in order.iter().take(k) {
        chosen[b] = true;
    }
    FoveationMask::from_blocks(1, height, width, |_, by, bx| chosen[by * bw + bx])
}

/// Declarative mask description (config files, CLI).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    Full,
    Circle { cy: f64, cx: f64, r: f64 },
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Union { parts: Vec<MaskSpec> },
    Saliency { map: GrayMap, budget: f64 },
    Bboxes { boxes: Vec<BBox> },
    Trajectory { points: Vec<ControlPoint> },
    CenteredRatio { ratio: f64 },
}

impl MaskSpec {
    pub fn build(&self, frames: usize, height: usize, width: usize) -> Result<FoveationMask> {
        let single = match self {
            MaskSpec::Full => FoveationMask::all_ones(1, height, width)?,
            MaskSpec::Circle { cy, cx, r } => {
                if !(0.0..=height as f64).contains(cy) || !(0.0..=width as f64).contains(cx) {
                    return Err(Error::invalid("circle center outside the grid"));
                }
                make_circle(height, width, (*cy, *cx), *r)?
            }
            MaskSpec::Rect { y0, x0, y1, x1 } => make_rect(height, width, (*y0, *x0), (*y1, *x1))?,
            MaskSpec::Union { parts } => {
                let ms = parts.iter().map(|p| p.build(frames, height, width)).collect::<Result<Vec<_>>>()?;
                return union(&ms);
            }
            MaskSpec::Saliency { map, budget } => from_saliency(map, height, width, *budget)?,
            MaskSpec::Bboxes { boxes } => from_bboxes(height, width, boxes)?.0,
            MaskSpec::Trajectory { points } => return make_trajectory(frames, height, width, points),
            MaskSpec::CenteredRatio { ratio } => centered_for_ratio(height, width, *ratio)?,
        };
        FoveationMask::stack(&vec![single; frames])
    }
}

/// Per-frame file names: the path itself for a single frame, otherwise
/// `<stem>_<NNN>.<ext>` with a zero-padded frame index.
pub fn frame_paths(path: &Path, frames: usize) -> Vec<PathBuf> {
    if frames == 1 {
        return vec![path.to_path_buf()];
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mask");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("pgm");
    (0..frames).map(|t| path.with_file_name(format!("{stem}_{t:03}.{ext}"))).collect()
}

/// Writes one P5 file per frame: 255 for HR cells, 0 for LR cells.
pub fn save_mask(mask: &FoveationMask, path: &Path) -> Result<Vec<PathBuf>> {
    let paths = frame_paths(path, mask.frames);
    for (t, p) in paths.iter().enumerate() {
        let f = mask.frame(t);
        let g = Gray8 {
            width: mask.width,
            height: mask.height,
            data: f.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        };
        pnm::write_pgm(p, &g)?;
    }
    Ok(paths)
}

pub fn decode_mask_frame(g: &Gray8, maxval: usize) -> Result<FoveationMask> {
    if maxval != 255 {
        return Err(Error::Format(format!("mask files must use maxval 255, got {maxval}")));
    }
    if let Some(v) = g.data.iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::Format(format!("mask contains intermediate value {v}")));
    }
    FoveationMask::new(1, g.height, g.width, g.data.iter().map(|&v| v == 255).collect())
}

/// Loads a mask written by [`save_mask`]. If `path` exists it is read as a
/// single frame; otherwise consecutive `<stem>_<NNN>` frames are collected.
pub fn load_mask(path: &Path) -> Result<FoveationMask> {
    if path.exists() {
        let (g, maxval) = pnm::read_pgm(path)?;
        return decode_mask_frame(&g, maxval);
    }
    let mut frames = Vec::new();
    loop {
        let candidate = frame_paths(path, frames.len() + 2)[frames.len()].clone();
        if !candidate.exists() {
            break;
        }
        let (g, maxval) = pnm::read_pgm(&candidate)?;
        frames.push(decode_mask_frame(&g, maxval)?);
    }
    if frames.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no mask at {} or its frame series", path.display()),
        )));
    }
    FoveationMask::stack(&frames)
}
