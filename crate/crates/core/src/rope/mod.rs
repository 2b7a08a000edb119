//! Mixed-resolution rotary embeddings and the two-pass attention rule.
//!
//! HR queries attend to every token with positions in HR units (an LR token
//! sits at its block's subsample site). LR queries attend to all LR tokens
//! plus one representative HR token per fully-HR block, with positions in
//! LR units. Outputs are written back in layout order.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, RopeTable, Tensor, Var};
use crate::tokenizer::{TokenClass, TokenLayout};

/// Where an LR token sits inside its 2×2 block when expressed in HR units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsampleSite {
    #[default]
    TopLeft,
    BlockCenter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub theta: f64,
    pub site: SubsampleSite,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { heads: 4, head_dim: 32, theta: 10000.0, site: SubsampleSite::TopLeft }
    }
}

impl AttentionConfig {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "head_dim must be positive and even (got {} heads of {})",
                self.heads, self.head_dim
            )));
        }
        if !(self.theta > 1.0) {
            return Err(Error::invalid("rotary base must exceed 1"));
        }
        Ok(())
    }

    /// Channel pairs per axis, in channel order `[t?, y, x]`. Pairs are split
    /// evenly; leftovers go to y first, then x.
    pub fn axis_pairs(&self, frames: usize) -> Vec<(Axis, usize)> {
        let pairs = self.head_dim / 2;
        let axes: &[Axis] = if frames > 1 { &[Axis::T, Axis::Y, Axis::X] } else { &[Axis::Y, Axis::X] };
        let n = axes.len();
        let (base, mut rem) = (pairs / n, pairs % n);
        let mut out: Vec<(Axis, usize)> = axes.iter().map(|&a| (a, base)).collect();
        for a in [Axis::Y, Axis::X] {
            if rem > 0 {
                out.iter_mut().find(|(ax, _)| *ax == a).unwrap().1 += 1;
                rem -= 1;
            }
        }
        out
    }

    /// Rotation angles (`rows × head_dim/2`, row-major) for the given positions.
    pub fn angles(&self, positions: &[[f64; 3]], frames: usize) -> Vec<f64> {
        let split = self.axis_pairs(frames);
        let mut out = Vec::with_capacity(positions.len() * self.head_dim / 2);
        for pos in positions {
            for &(axis, n) in &split {
                let axis_dim = (2 * n) as f64;
                for k in 0..n {
                    out.push(pos[axis as usize] * self.theta.powf(-2.0 * k as f64 / axis_dim));
                }
            }
        }
        out
    }

    pub fn table<F: Real>(&self, positions: &[[f64; 3]], frames: usize) -> RopeTable<F> {
        RopeTable::from_angles(positions.len(), self.head_dim / 2, &self.angles(positions, frames))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    T = 0,
    Y = 1,
    X = 2,
}

/// Per-token coordinates in both unit systems, plus the pass memberships.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionTable {
    pub frames: usize,
    /// `(t, y, x)` in HR-grid units for every token.
    pub hr_units: Vec<[f64; 3]>,
    /// `(t, y, x)` in LR-grid units for LR tokens and block representatives; `None` otherwise.
    pub lr_units: Vec<Option<[f64; 3]>>,
    /// Sequence index of the representative HR token of each fully-HR block
    /// (`f × h/2 × w/2`, `None` for LR blocks).
    pub representatives: Vec<Option<usize>>,
    pub hr_queries: Vec<usize>,
    pub lr_queries: Vec<usize>,
    /// Keys of the LR pass in sequence order: LR tokens and representatives.
    pub lr_keys: Vec<usize>,
}

pub fn assign_positions(layout: &TokenLayout, site: SubsampleSite) -> PositionTable {
    let (f, h, w) = (layout.frames(), layout.height(), layout.width());
    let (bh, bw) = (h / 2, w / 2);
    let off = match site {
        SubsampleSite::TopLeft => 0.0,
        SubsampleSite::BlockCenter => 0.5,
    };
    let mut hr_units = Vec::with_capacity(layout.len());
    let mut lr_units = vec![None; layout.len()];
    let mut representatives = vec![None; f * bh * bw];
    let (mut hr_queries, mut lr_queries) = (Vec::new(), Vec::new());
    for (i, e) in layout.entries().iter().enumerate() {
        let t = e.frame as f64;
        match e.class {
            TokenClass::Hr => {
                hr_units.push([t, e.y as f64, e.x as f64]);
                hr_queries.push(i);
                if e.y % 2 == 0 && e.x % 2 == 0 && layout.mask().block_is_hr(e.frame, e.y / 2, e.x / 2) {
                    representatives[(e.frame * bh + e.y / 2) * bw + e.x / 2] = Some(i);
                    lr_units[i] = Some([t, (e.y / 2) as f64, (e.x / 2) as f64]);
                }
            }
            TokenClass::Lr => {
                hr_units.push([t, 2.0 * e.y as f64 + off, 2.0 * e.x as f64 + off]);
                lr_units[i] = Some([t, e.y as f64, e.x as f64]);
                lr_queries.push(i);
            }
        }
    }
    let lr_keys = (0..layout.len()).filter(|&i| lr_units[i].is_some()).collect();
    PositionTable { frames: f, hr_units, lr_units, representatives, hr_queries, lr_queries, lr_keys }
}

impl PositionTable {
    pub fn len(&self) -> usize {
        self.hr_units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr_units.is_empty()
    }

    /// Adds `(dy, dx)` LR units to every position (`2·dy, 2·dx` in HR units).
    pub fn shifted(&self, dy: f64, dx: f64) -> Self {
        let mut out = self.clone();
        for p in &mut out.hr_units {
            p[1] += 2.0 * dy;
            p[2] += 2.0 * dx;
        }
        for p in out.lr_units.iter_mut().flatten() {
            p[1] += dy;
            p[2] += dx;
        }
        out
    }

    /// HR-pass key count (every token).
    pub fn hr_key_count(&self) -> usize {
        self.len()
    }

    pub fn lr_key_count(&self) -> usize {
        self.lr_keys.len()
    }
}

/// Rotation tables and index sets for one layout, reusable across layers.
#[derive(Clone, Debug)]
pub struct AttentionPlan<F> {
    pub heads: usize,
    pub head_dim: usize,
    len: usize,
    hr_queries: Option<Arc<[usize]>>,
    lr_queries: Arc<[usize]>,
    lr_keys: Arc<[usize]>,
    hr_all_identity: bool,
    hr_q_table: Arc<RopeTable<F>>,
    hr_k_table: Arc<RopeTable<F>>,
    lr_q_table: Arc<RopeTable<F>>,
    lr_k_table: Arc<RopeTable<F>>,
}

impl<F: Real> AttentionPlan<F> {
    pub fn new(cfg: &AttentionConfig, pos: &PositionTable) -> Result<Self> {
        cfg.validate()?;
        let f = pos.frames;
        let pick = |idx: &[usize]| -> Vec<[f64; 3]> { idx.iter().map(|&i| pos.hr_units[i]).collect() };
        let pick_lr = |idx: &[usize]| -> Vec<[f64; 3]> { idx.iter().map(|&i| pos.lr_units[i].unwrap()).collect() };
        let hr_all_identity = pos.hr_queries.len() == pos.len();
        Ok(Self {
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            len: pos.len(),
            hr_queries: (!pos.hr_queries.is_empty()).then(|| pos.hr_queries.clone().into()),
            lr_queries: pos.lr_queries.clone().into(),
            lr_keys: pos.lr_keys.clone().into(),
            hr_all_identity,
            hr_q_table: Arc::new(cfg.table(&pick(&pos.hr_queries), f)),
            hr_k_table: Arc::new(cfg.table(&pos.hr_units, f)),
            lr_q_table: Arc::new(cfg.table(&pick_lr(&pos.lr_queries), f)),
            lr_k_table: Arc::new(cfg.table(&pick_lr(&pos.lr_keys), f)),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Two-pass attention on the tape. `q`, `k`, `v` are `L × (heads·head_dim)`.
    pub fn attend(&self, g: &mut Graph<F>, q: Var, k: Var, v: Var) -> Result<Var> {
        self.attend_inner(g, q, k, v, None)
    }

    fn attend_inner(
        &self,
        g: &mut Graph<F>,
        q: Var,
        k: Var,
        v: Var,
        mut weights: Option<&mut Vec<Tensor<F>>>,
    ) -> Result<Var> {
        let d = self.heads * self.head_dim;
        for (name, x) in [("q", q), ("k", k), ("v", v)] {
            let t = g.value(x);
            if t.shape().len() != 2 || t.rows() != self.len || t.cols() != d {
                return Err(Error::dim(
                    "mixed_attention",
                    format!("{name} is {:?}, expected [{}, {d}]", t.shape(), self.len),
                ));
            }
        }
        let mut out: Option<Var> = None;
        if let Some(hq) = &self.hr_queries {
            let qh = if self.hr_all_identity { q } else { g.gather_rows(q, hq.clone())? };
            let qh = g.rope(qh, self.hr_q_table.clone())?;
            let kh = g.rope(k, self.hr_k_table.clone())?;
            let o = multi_head(g, qh, kh, v, self.heads, self.head_dim, weights.as_deref_mut())?;
            out = Some(if self.hr_all_identity { o } else { g.scatter_rows(o, hq.clone(), self.len)? });
        }
        if !self.lr_queries.is_empty() {
            let ql = g.gather_rows(q, self.lr_queries.clone())?;
            let ql = g.rope(ql, self.lr_q_table.clone())?;
            let kl = g.gather_rows(k, self.lr_keys.clone())?;
            let kl = g.rope(kl, self.lr_k_table.clone())?;
            let vl = g.gather_rows(v, self.lr_keys.clone())?;
            let o = multi_head(g, ql, kl, vl, self.heads, self.head_dim, weights)?;
            let o = g.scatter_rows(o, self.lr_queries.clone(), self.len)?;
            out = Some(match out {
                Some(h) => g.add(h, o)?,
                None => o,
            });
        }
        out.ok_or_else(|| Error::invalid("attention over an empty sequence"))
    }
}

/// Scaled dot-product attention per head; heads are contiguous column blocks.
fn multi_head<F: Real>(
    g: &mut Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    hd: usize,
    mut weights: Option<&mut Vec<Tensor<F>>>,
) -> Result<Var> {
    let scale = F::lit(1.0 / (hd as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * hd, hd)?, g.slice_cols(k, h * hd, hd)?, g.slice_cols(v, h * hd, hd)?)
        };
        let s = g.matmul_nt(qh, kh, scale)?;
        let p = g.softmax_rows(s);
        if let Some(w) = weights.as_deref_mut() {
            w.push(g.value(p).clone());
        }
        outs.push(g.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Plain-tensor entry point for the two-pass rule.
pub fn mixed_attention<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    layout: &TokenLayout,
    cfg: &AttentionConfig,
) -> Result<Tensor<F>> {
    Ok(mixed_attention_with_weights(q, k, v, layout, cfg)?.0)
}

/// Like [`mixed_attention`], also returning the softmax weights of every
/// (pass, head) in order: HR pass heads first, then LR pass heads.
pub fn mixed_attention_with_weights<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    layout: &TokenLayout,
    cfg: &AttentionConfig,
) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
    let pos = assign_positions(layout, cfg.site);
    let plan = AttentionPlan::new(cfg, &pos)?;
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let mut weights = Vec::new();
    let out = plan.attend_inner(&mut g, qv, kv, vv, Some(&mut weights))?;
    Ok((g.value(out).clone(), weights))
}

/// Uniform-grid 2-D/3-D RoPE attention over a dense `f × h × w` token grid in
/// row-major order. Reference path for the all-HR case.
pub fn standard_attention<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    frames: usize,
    height: usize,
    width: usize,
    cfg: &AttentionConfig,
) -> Result<Tensor<F>> {
    cfg.validate()?;
    let positions: Vec<[f64; 3]> = (0..frames * height * width)
        .map(|i| [(i / (height * width)) as f64, (i / width % height) as f64, (i % width) as f64])
        .collect();
    let table = Arc::new(cfg.table::<F>(&positions, frames));
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let qr = g.rope(qv, table.clone())?;
    let kr = g.rope(kv, table)?;
    let out = multi_head(&mut g, qr, kr, vv, cfg.heads, cfg.head_dim, None)?;
    Ok(g.value(out).clone())
}

/// Rotates each head's channel pairs of `x` (`rows × heads·head_dim`) to the given positions.
pub fn rotate<F: Real>(x: &Tensor<F>, positions: &[[f64; 3]], frames: usize, cfg: &AttentionConfig) -> Result<Tensor<F>> {
    cfg.validate()?;
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let r = g.rope(xv, Arc::new(cfg.table(positions, frames)))?;
    Ok(g.value(r).clone())
}
