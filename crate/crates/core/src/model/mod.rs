//! Velocity network: a small adaLN-zero diffusion transformer over foveated sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::rope::{assign_positions, AttentionConfig, AttentionPlan, SubsampleSite};
use crate::tokenizer::{CodecConfig, FoveatedSequence, TokenLayout};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiTConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub codec: CodecConfig,
    pub num_classes: usize,
    pub time_dim: usize,
    pub mlp_ratio: usize,
    pub theta: f64,
    pub site: SubsampleSite,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            width: 128,
            heads: 4,
            codec: CodecConfig::default(),
            num_classes: 8,
            time_dim: 256,
            mlp_ratio: 4,
            theta: 10000.0,
            site: SubsampleSite::TopLeft,
        }
    }
}

impl DiTConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            head_dim: self.width / self.heads.max(1),
            theta: self.theta,
            site: self.site,
        }
    }

    pub fn channels(&self) -> usize {
        self.codec.channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("width {} is not divisible by {} heads", self.width, self.heads)));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) || self.num_classes == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("time_dim must be even; num_classes and mlp_ratio positive"));
        }
        self.attention().validate()
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ada_w: ParamId,
    ada_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    in_w: ParamId,
    in_b: ParamId,
    t1_w: ParamId,
    t1_b: ParamId,
    t2_w: ParamId,
    t2_b: ParamId,
    class_emb: ParamId,
    blocks: Vec<BlockIds>,
    final_ada_w: ParamId,
    final_ada_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Model configuration plus its parameters.
#[derive(Clone, Debug)]
pub struct DiT<F> {
    pub config: DiTConfig,
    pub params: ParamStore<F>,
    ids: Ids,
}

/// Sinusoidal embedding of `t·1000`: `[cos(t·1000·ω_i), sin(t·1000·ω_i)]`, `ω_i = 10000^(-i/half)`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let s = t * 1000.0;
    let freq = |i: usize| (-(10000f64.ln()) * i as f64 / half as f64).exp();
    let mut out: Vec<f64> = (0..half).map(|i| (s * freq(i)).cos()).collect();
    out.extend((0..half).map(|i| (s * freq(i)).sin()));
    out
}

impl<F: Real> DiT<F> {
    /// Registers every parameter. Weights use a scaled normal init; adaLN
    /// modulation and the output projection start at zero.
    pub fn new(config: DiTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, d, td) = (config.channels(), config.width, config.time_dim);
        let hidden = config.mlp_ratio * d;
        let mut normal = |store: &mut ParamStore<F>, name: String, rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).unwrap();
            store.add(name, Tensor::from_fn(&[rows, cols], |_| F::lit(dist.sample(&mut rng))))
        };
        let zeros = |store: &mut ParamStore<F>, name: String, rows: usize, cols: usize| {
            store.add(name, Tensor::zeros(&[rows, cols]))
        };
        let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();

        let in_w = normal(&mut store, "in.w".into(), c, d, xavier(c, d));
        let in_b = zeros(&mut store, "in.b".into(), 1, d);
        let t1_w = normal(&mut store, "time.fc1.w".into(), td, d, 0.02);
        let t1_b = zeros(&mut store, "time.fc1.b".into(), 1, d);
        let t2_w = normal(&mut store, "time.fc2.w".into(), d, d, 0.02);
        let t2_b = zeros(&mut store, "time.fc2.b".into(), 1, d);
        let class_emb = normal(&mut store, "class.emb".into(), config.num_classes, d, 0.02);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = |s: &str| format!("block{i}.{s}");
            blocks.push(BlockIds {
                ada_w: zeros(&mut store, p("ada.w"), d, 6 * d),
                ada_b: zeros(&mut store, p("ada.b"), 1, 6 * d),
                qkv_w: normal(&mut store, p("qkv.w"), d, 3 * d, xavier(d, d)),
                qkv_b: zeros(&mut store, p("qkv.b"), 1, 3 * d),
                proj_w: normal(&mut store, p("proj.w"), d, d, xavier(d, d)),
                proj_b: zeros(&mut store, p("proj.b"), 1, d),
                fc1_w: normal(&mut store, p("fc1.w"), d, hidden, xavier(d, hidden)),
                fc1_b: zeros(&mut store, p("fc1.b"), 1, hidden),
                fc2_w: normal(&mut store, p("fc2.w"), hidden, d, xavier(hidden, d)),
                fc2_b: zeros(&mut store, p("fc2.b"), 1, d),
            });
        }
        let final_ada_w = zeros(&mut store, "final.ada.w".into(), d, 2 * d);
        let final_ada_b = zeros(&mut store, "final.ada.b".into(), 1, 2 * d);
        let out_w = zeros(&mut store, "out.w".into(), d, c);
        let out_b = zeros(&mut store, "out.b".into(), 1, c);
        let ids = Ids {
            in_w,
            in_b,
            t1_w,
            t1_b,
            t2_w,
            t2_b,
            class_emb,
            blocks,
            final_ada_w,
            final_ada_b,
            out_w,
            out_b,
        };
        Ok(Self { config, params: store, ids })
    }

    /// Rebuilds a model from a parameter store whose names and shapes match `config`.
    pub fn from_params(config: DiTConfig, params: ParamStore<F>) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (a, b) in template.params.iter().zip(params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(Self { config, params, ids: template.ids })
    }

    /// Same architecture bound to a different parameter store (names must match).
    pub fn with_params(&self, params: ParamStore<F>) -> Self {
        Self { config: self.config.clone(), params, ids: self.ids.clone() }
    }

    /// Overwrites every parameter, including the zero-initialized ones, with
    /// normal samples of the given std. Used to activate all gradient paths.
    pub fn randomize(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).unwrap();
        for p in self.params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = F::lit(dist.sample(&mut rng)));
        }
    }

    pub fn plan(&self, layout: &TokenLayout) -> Result<AttentionPlan<F>> {
        let cfg = self.config.attention();
        AttentionPlan::new(&cfg, &assign_positions(layout, cfg.site))
    }

    fn linear(&self, g: &mut Graph<F>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = g.param(&self.params, w);
        let bv = g.param(&self.params, b);
        let y = g.matmul(x, wv)?;
        g.add_row(y, bv)
    }

    /// `LN(x) ⊙ (1 + scale) + shift`.
    fn modulate(g: &mut Graph<F>, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = g.layer_norm(x, F::lit(LN_EPS))?;
        let s = g.mul_row(n, scale)?;
        let y = g.add(n, s)?;
        g.add_row(y, shift)
    }

    /// Conditioning vector (`1 × width`) from the timestep and class.
    fn conditioning(&self, g: &mut Graph<F>, t: f64, class_id: usize) -> Result<Var> {
        if class_id >= self.config.num_classes {
            return Err(Error::Validation(format!(
                "class {class_id} out of range (num_classes = {})",
                self.config.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Validation(format!("timestep {t} outside [0, 1]")));
        }
        let emb = timestep_embedding(t, self.config.time_dim);
        let e = g.input(Tensor::new(&[1, emb.len()], emb.into_iter().map(F::lit).collect())?);
        let h = self.linear(g, e, self.ids.t1_w, self.ids.t1_b)?;
        let h = g.silu(h);
        let h = self.linear(g, h, self.ids.t2_w, self.ids.t2_b)?;
        let table = g.param(&self.params, self.ids.class_emb);
        let row = g.gather_rows(table, vec![class_id].into())?;
        g.add(h, row)
    }

    /// Velocity for `x` (an `L × c` token matrix) on the tape.
    pub fn forward_graph(&self, g: &mut Graph<F>, x: Var, t: f64, class_id: usize, plan: &AttentionPlan<F>) -> Result<Var> {
        let d = self.config.width;
        let xv = g.value(x);
        if xv.shape().len() != 2 || xv.cols() != self.config.channels() || xv.rows() != plan.len() {
            return Err(Error::dim(
                "forward",
                format!("tokens {:?}, expected [{}, {}]", xv.shape(), plan.len(), self.config.channels()),
            ));
        }
        let cond = self.conditioning(g, t, class_id)?;
        let cond = g.silu(cond);
        let mut h = self.linear(g, x, self.ids.in_w, self.ids.in_b)?;
        for b in &self.ids.blocks {
            let m = self.linear(g, cond, b.ada_w, b.ada_b)?;
            let part = |g: &mut Graph<F>, i: usize| g.slice_cols(m, i * d, d);
            let (shift1, scale1, gate1) = (part(g, 0)?, part(g, 1)?, part(g, 2)?);
            let (shift2, scale2, gate2) = (part(g, 3)?, part(g, 4)?, part(g, 5)?);

            let a = Self::modulate(g, h, shift1, scale1)?;
            let qkv = self.linear(g, a, b.qkv_w, b.qkv_b)?;
            let q = g.slice_cols(qkv, 0, d)?;
            let k = g.slice_cols(qkv, d, d)?;
            let v = g.slice_cols(qkv, 2 * d, d)?;
            let att = plan.attend(g, q, k, v)?;
            let att = self.linear(g, att, b.proj_w, b.proj_b)?;
            let att = g.mul_row(att, gate1)?;
            h = g.add(h, att)?;

            let a = Self::modulate(g, h, shift2, scale2)?;
            let f = self.linear(g, a, b.fc1_w, b.fc1_b)?;
            let f = g.gelu(f);
            let f = self.linear(g, f, b.fc2_w, b.fc2_b)?;
            let f = g.mul_row(f, gate2)?;
            h = g.add(h, f)?;
        }
        let m = self.linear(g, cond, self.ids.final_ada_w, self.ids.final_ada_b)?;
        let shift = g.slice_cols(m, 0, d)?;
        let scale = g.slice_cols(m, d, d)?;
        let a = Self::modulate(g, h, shift, scale)?;
        self.linear(g, a, self.ids.out_w, self.ids.out_b)
    }

    pub fn forward(&self, z: &FoveatedSequence<F>, t: f64, class_id: usize) -> Result<FoveatedSequence<F>> {
        if !z.tokens.is_finite() {
            return Err(Error::NonFinite("forward input".into()));
        }
        let plan = self.plan(&z.layout)?;
        self.forward_with_plan(z, t, class_id, &plan)
    }

    pub fn forward_with_plan(
        &self,
        z: &FoveatedSequence<F>,
        t: f64,
        class_id: usize,
        plan: &AttentionPlan<F>,
    ) -> Result<FoveatedSequence<F>> {
        let mut g = Graph::new();
        let x = g.input(z.tokens.clone());
        let v = self.forward_graph(&mut g, x, t, class_id, plan)?;
        FoveatedSequence::new(z.layout.clone(), g.value(v).clone())
    }

    /// Flow-matching loss on the tape: `z_t = (1-t)·z0 + t·noise`, target `noise - z0`.
    pub fn loss_graph(
        &self,
        g: &mut Graph<F>,
        z0: &Tensor<F>,
        noise: &Tensor<F>,
        t: f64,
        class_id: usize,
        plan: &AttentionPlan<F>,
    ) -> Result<Var> {
        if z0.shape() != noise.shape() {
            return Err(Error::dim("loss", format!("z0 {:?} vs noise {:?}", z0.shape(), noise.shape())));
        }
        let (zt, target) = interpolate(z0, noise, t);
        let x = g.input(zt);
        let v = self.forward_graph(g, x, t, class_id, plan)?;
        let tv = g.input(target);
        g.mse(v, tv)
    }

    pub fn loss(&self, z0: &FoveatedSequence<F>, noise: &Tensor<F>, t: f64, class_id: usize) -> Result<F> {
        let plan = self.plan(&z0.layout)?;
        let mut g = Graph::new();
        let l = self.loss_graph(&mut g, &z0.tokens, noise, t, class_id, &plan)?;
        Ok(g.value(l).data()[0])
    }
}

/// `(z_t, target)` for the linear interpolation path.
pub fn interpolate<F: Real>(z0: &Tensor<F>, noise: &Tensor<F>, t: f64) -> (Tensor<F>, Tensor<F>) {
    let (tt, omt) = (F::lit(t), F::lit(1.0 - t));
    let zt: Vec<F> = z0.data().iter().zip(noise.data()).map(|(&a, &n)| omt * a + tt * n).collect();
    let target: Vec<F> = z0.data().iter().zip(noise.data()).map(|(&a, &n)| n - a).collect();
    (
        Tensor::new(z0.shape(), zt).expect("same shape"),
        Tensor::new(z0.shape(), target).expect("same shape"),
    )
}

/// Finite-difference check of the full loss gradient on `samples` parameter
/// coordinates drawn uniformly (by flat index) from a randomized f64 model.
pub fn check_loss_gradient(
    config: DiTConfig,
    mask: &crate::mask::FoveationMask,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<crate::numerics::check::GradCheckReport> {
    use rand::Rng;
    let mut model = DiT::<f64>::new(config, seed)?;
    model.randomize(seed ^ 0x5eed, 0.2);
    let layout = std::sync::Arc::new(TokenLayout::new(mask)?);
    let plan = model.plan(&layout)?;
    let c = model.config.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let z0 = Tensor::from_fn(&[layout.len(), c], |_| normal.sample(&mut rng));
    let noise = Tensor::from_fn(&[layout.len(), c], |_| normal.sample(&mut rng));
    let t: f64 = rng.gen_range(0.05..0.95);
    let class_id = rng.gen_range(0..model.config.num_classes);

    let sizes: Vec<usize> = model.params.iter().map(|p| p.value.numel()).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<(ParamId, usize)> = (0..samples)
        .map(|_| {
            let mut flat = rng.gen_range(0..total);
            let mut id = 0;
            while flat >= sizes[id] {
                flat -= sizes[id];
                id += 1;
            }
            (ParamId(id), flat)
        })
        .collect();
    let mut store = model.params.clone();
    crate::numerics::check::grad_check(&mut store, &coords, h, 1e-6, |s| {
        let m = model.with_params(s.clone());
        let mut g = Graph::new();
        let l = m.loss_graph(&mut g, &z0, &noise, t, class_id, &plan)?;
        Ok((g, l))
    })
}

#[cfg(test)]
mod tests;
