use std::sync::Arc;

use super::kernels::{gemm, layer_norm_rows, softmax_rows_in_place};
use super::param::{ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Per-row rotation angles for rotary embeddings, shared across heads.
///
/// Row `r`, pair `j` rotates channels `(h*head_dim + 2j, h*head_dim + 2j + 1)`
/// of every head `h` by the angle whose cosine/sine are stored at `r*pairs + j`.
#[derive(Clone, Debug)]
pub struct RopeTable<F> {
    pub rows: usize,
    pub pairs: usize,
    pub cos: Vec<F>,
    pub sin: Vec<F>,
}

impl<F: Real> RopeTable<F> {
    pub fn from_angles(rows: usize, pairs: usize, angles: &[f64]) -> Self {
        assert_eq!(angles.len(), rows * pairs);
        Self {
            rows,
            pairs,
            cos: angles.iter().map(|a| F::lit(a.cos())).collect(),
            sin: angles.iter().map(|a| F::lit(a.sin())).collect(),
        }
    }

    /// Rows of this table picked by `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut cos = Vec::with_capacity(idx.len() * self.pairs);
        let mut sin = Vec::with_capacity(idx.len() * self.pairs);
        for &r in idx {
            cos.extend_from_slice(&self.cos[r * self.pairs..(r + 1) * self.pairs]);
            sin.extend_from_slice(&self.sin[r * self.pairs..(r + 1) * self.pairs]);
        }
        Self { rows: idx.len(), pairs: self.pairs, cos, sin }
    }

    fn apply(&self, x: &[F], cols: usize, out: &mut [F], inverse: bool) {
        let head_dim = self.pairs * 2;
        let heads = cols / head_dim;
        for r in 0..self.rows {
            let cs = &self.cos[r * self.pairs..(r + 1) * self.pairs];
            let sn = &self.sin[r * self.pairs..(r + 1) * self.pairs];
            let xr = &x[r * cols..(r + 1) * cols];
            let or = &mut out[r * cols..(r + 1) * cols];
            for h in 0..heads {
                let base = h * head_dim;
                for j in 0..self.pairs {
                    let (c, s) = (cs[j], if inverse { -sn[j] } else { sn[j] });
                    let x0 = xr[base + 2 * j];
                    let x1 = xr[base + 2 * j + 1];
                    or[base + 2 * j] = x0 * c - x1 * s;
                    or[base + 2 * j + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

enum Op<F> {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool, alpha: F },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    /// `sig` caches `sigmoid(2u)`, where gelu(x) = x·sigmoid(2u).
    Gelu { a: Var, sig: Vec<F> },
    Silu(Var),
    SoftmaxRows(Var),
    LayerNorm { a: Var, inv_std: Vec<F> },
    GatherRows { a: Var, idx: Arc<[usize]> },
    ScatterRows { a: Var, idx: Arc<[usize]> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    Rope { a: Var, table: Arc<RopeTable<F>> },
    Sum(Var),
    Mean(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Append-only tape of tensor operations. Nodes are evaluated eagerly;
/// [`Graph::backward`] walks the tape in reverse.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape2(t: &Tensor<impl Real>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf bound to a stored parameter; backward accumulates into it.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, F::one())
    }

    /// `alpha * a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, alpha: F) -> Result<Var> {
        self.matmul_ex(a, b, true, alpha)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool, alpha: F) -> Result<Var> {
        let (m, k) = shape2(self.value(a));
        let (br, bc) = shape2(self.value(b));
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?} (trans_b={})", self.value(a).shape(), self.value(b).shape(), trans_b),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, alpha, self.value(a).data(), false, self.value(b).data(), trans_b, F::zero(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b, alpha }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_map(&mut self, op_name: &'static str, a: Var, row: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        let va = self.value(a);
        let vr = self.value(row);
        let c = va.cols();
        if vr.numel() != c {
            return Err(Error::dim(op_name, format!("{:?} with row {:?}", va.shape(), vr.shape())));
        }
        let mut out = va.clone();
        for r in out.data_mut().chunks_mut(c) {
            for (x, &y) in r.iter_mut().zip(vr.data()) {
                *x = f(*x, y);
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, op, ng))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_map("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_map("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let sig: Vec<F> = out.data().iter().map(|&x| gelu_sigmoid(x)).collect();
        out.data_mut().iter_mut().zip(&sig).for_each(|(v, &s)| *v *= s);
        let ng = self.ng(a);
        self.push(out, Op::Gelu { a, sig }, ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * sigmoid(*v));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols();
        softmax_rows_in_place(out.data_mut(), c);
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Row normalization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: F) -> Result<Var> {
        let va = self.value(a);
        let d = va.cols();
        if d == 0 {
            return Err(Error::dim("layer_norm", "zero-width rows"));
        }
        let mut out = va.clone();
        let mut inv = vec![F::zero(); va.rows()];
        layer_norm_rows(va.data(), d, eps, out.data_mut(), &mut inv);
        let ng = self.ng(a);
        Ok(self.push(out, Op::LayerNorm { a, inv_std: inv }, ng))
    }

    /// Layer normalization followed by a per-column gain and bias.
    pub fn layer_norm_affine(&mut self, a: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let n = self.layer_norm(a, eps)?;
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let va = self.value(a);
        let (rows, c) = shape2(va);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", format!("row {} of {}", bad, rows)));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(va.row(i));
        }
        let t = Tensor::new(&[idx.len(), c], out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::GatherRows { a, idx }, ng))
    }

    /// Places row `r` of `a` at output row `idx[r]` of a zero matrix with
    /// `rows` rows. Duplicate targets add.
    pub fn scatter_rows(&mut self, a: Var, idx: Arc<[usize]>, rows: usize) -> Result<Var> {
        let va = self.value(a);
        let (ar, c) = shape2(va);
        if ar != idx.len() {
            return Err(Error::dim("scatter_rows", format!("{} rows, {} targets", ar, idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("scatter_rows", format!("target {} of {}", bad, rows)));
        }
        let mut out = vec![F::zero(); rows * c];
        for (r, &i) in idx.iter().enumerate() {
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(va.row(r)) {
                *o += v;
            }
        }
        let t = Tensor::new(&[rows, c], out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::ScatterRows { a, idx }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let (rows, c) = shape2(va);
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("{}..{} of {}", start, start + len, c)));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&va.row(r)[start..start + len]);
        }
        let t = Tensor::new(&[rows, len], out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::SliceCols { a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols", "no inputs"));
        };
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(&[rows, total], out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rotates channel pairs of every head by the per-row angles in `table`.
    pub fn rope(&mut self, a: Var, table: Arc<RopeTable<F>>) -> Result<Var> {
        let va = self.value(a);
        let (rows, c) = shape2(va);
        let hd = table.pairs * 2;
        if rows != table.rows || hd == 0 || c % hd != 0 {
            return Err(Error::dim(
                "rope",
                format!("{}x{} against table {}x{} pairs", rows, c, table.rows, table.pairs),
            ));
        }
        let mut out = va.clone();
        table.apply(va.data(), c, out.data_mut(), false);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Rope { a, table }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<F>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().copied().sum::<F>() / F::from_usize(va.numel().max(1)).unwrap();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Mean of squared differences between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Accumulates `d loss / d value` into every parameter gradient of `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        let mut bufs = store.grad_buffers();
        self.backward_into(loss, &mut bufs)?;
        store.accumulate(&bufs, F::one())
    }

    /// Adds parameter gradients of `loss` into `bufs`, indexed by [`ParamId`].
    pub fn backward_into(&self, loss: Var, bufs: &mut [Tensor<F>]) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.needs_grad {
            return Err(Error::Usage("backward called on a node detached from every parameter".into()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), F::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, bufs)?;
        }
        Ok(())
    }

    fn propagate(
        &self,
        node: &Node<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
        bufs: &mut [Tensor<F>],
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                let buf = bufs
                    .get_mut(id.0)
                    .ok_or_else(|| Error::Usage(format!("no gradient buffer for parameter {}", id.0)))?;
                for (b, &v) in buf.data_mut().iter_mut().zip(gd) {
                    *b += v;
                }
            }
            &Op::MatMul { a, b, trans_b, alpha } => {
                let va = self.value(a);
                let vb = self.value(b);
                let (m, k) = shape2(va);
                let n = g.cols();
                if self.ng(a) {
                    let slot = self.slot(grads, a);
                    // dA = alpha * dC @ op(B)^T
                    gemm(m, n, k, alpha, gd, false, vb.data(), !trans_b, F::one(), slot.data_mut());
                }
                if self.ng(b) {
                    let slot = self.slot(grads, b);
                    if trans_b {
                        // dB[n×k] = alpha * dC^T @ A
                        gemm(n, m, k, alpha, gd, true, va.data(), false, F::one(), slot.data_mut());
                    } else {
                        // dB[k×n] = alpha * A^T @ dC
                        gemm(k, m, n, alpha, va.data(), true, gd, false, F::one(), slot.data_mut());
                    }
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, gd, |x| x);
                self.acc(grads, b, gd, |x| x);
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, gd, |x| x);
                self.acc(grads, b, gd, |x| -x);
            }
            &Op::Mul(a, b) => {
                if self.ng(a) {
                    let vb = self.value(b).data();
                    let slot = self.slot(grads, a);
                    for ((s, &gv), &y) in slot.data_mut().iter_mut().zip(gd).zip(vb) {
                        *s += gv * y;
                    }
                }
                if self.ng(b) {
                    let va = self.value(a).data();
                    let slot = self.slot(grads, b);
                    for ((s, &gv), &x) in slot.data_mut().iter_mut().zip(gd).zip(va) {
                        *s += gv * x;
                    }
                }
            }
            &Op::AddRow(a, row) => {
                self.acc(grads, a, gd, |x| x);
                if self.ng(row) {
                    let c = g.cols();
                    let slot = self.slot(grads, row);
                    let s = slot.data_mut();
                    for r in gd.chunks(c) {
                        for (sv, &v) in s.iter_mut().zip(r) {
                            *sv += v;
                        }
                    }
                }
            }
            &Op::MulRow(a, row) => {
                let c = g.cols();
                if self.ng(a) {
                    let vr = self.value(row).data();
                    let slot = self.slot(grads, a);
                    for (srow, grow) in slot.data_mut().chunks_mut(c).zip(gd.chunks(c)) {
                        for ((s, &gv), &y) in srow.iter_mut().zip(grow).zip(vr) {
                            *s += gv * y;
                        }
                    }
                }
                if self.ng(row) {
                    let va = self.value(a).data();
                    let slot = self.slot(grads, row);
                    let s = slot.data_mut();
                    for (grow, arow) in gd.chunks(c).zip(va.chunks(c)) {
                        for ((sv, &gv), &x) in s.iter_mut().zip(grow).zip(arow) {
                            *sv += gv * x;
                        }
                    }
                }
            }
            &Op::Scale(a, sc) => self.acc(grads, a, gd, |x| x * sc),
            Op::Gelu { a, sig } => {
                let a = *a;
                let va = self.value(a).data();
                let k2 = F::lit(2.0 * (2.0 / std::f64::consts::PI).sqrt());
                let c3 = F::lit(3.0 * GELU_C);
                let slot = self.slot(grads, a);
                for (((s, &gv), &x), &sg) in slot.data_mut().iter_mut().zip(gd).zip(va).zip(sig) {
                    let du = k2 * (F::one() + c3 * x * x);
                    *s += gv * (sg + x * sg * (F::one() - sg) * du);
                }
            }
            &Op::Silu(a) => {
                let va = self.value(a).data();
                let slot = self.slot(grads, a);
                for ((s, &gv), &x) in slot.data_mut().iter_mut().zip(gd).zip(va) {
                    let sg = sigmoid(x);
                    *s += gv * (sg + x * sg * (F::one() - sg));
                }
            }
            &Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let c = g.cols();
                let slot = self.slot(grads, a);
                for ((srow, grow), yrow) in slot.data_mut().chunks_mut(c).zip(gd.chunks(c)).zip(y.chunks(c)) {
                    let dot = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum::<F>();
                    for ((s, &gv), &yv) in srow.iter_mut().zip(grow).zip(yrow) {
                        *s += yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let a = *a;
                let y = node.value.data();
                let c = g.cols();
                let dn = F::from_usize(c).unwrap();
                let slot = self.slot(grads, a);
                for (((srow, grow), yrow), &inv) in slot
                    .data_mut()
                    .chunks_mut(c)
                    .zip(gd.chunks(c))
                    .zip(y.chunks(c))
                    .zip(inv_std.iter())
                {
                    let mg = grow.iter().copied().sum::<F>() / dn;
                    let mgy = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum::<F>() / dn;
                    for ((s, &gv), &yv) in srow.iter_mut().zip(grow).zip(yrow) {
                        *s += inv * (gv - mg - yv * mgy);
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let a = *a;
                let c = g.cols();
                let slot = self.slot(grads, a);
                let s = slot.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for (sv, &v) in s[i * c..(i + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                        *sv += v;
                    }
                }
            }
            Op::ScatterRows { a, idx } => {
                let a = *a;
                let c = g.cols();
                let slot = self.slot(grads, a);
                let s = slot.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for (sv, &v) in s[r * c..(r + 1) * c].iter_mut().zip(&gd[i * c..(i + 1) * c]) {
                        *sv += v;
                    }
                }
            }
            &Op::SliceCols { a, start } => {
                let len = g.cols();
                let slot = self.slot(grads, a);
                let ac = slot.cols();
                for (srow, grow) in slot.data_mut().chunks_mut(ac).zip(gd.chunks(len)) {
                    for (sv, &v) in srow[start..start + len].iter_mut().zip(grow) {
                        *sv += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.ng(p) {
                        let slot = self.slot(grads, p);
                        for (srow, grow) in slot.data_mut().chunks_mut(pc).zip(gd.chunks(total)) {
                            for (sv, &v) in srow.iter_mut().zip(&grow[off..off + pc]) {
                                *sv += v;
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::Rope { a, table } => {
                let a = *a;
                let c = g.cols();
                let mut back = vec![F::zero(); gd.len()];
                table.apply(gd, c, &mut back, true);
                self.acc(grads, a, &back, |x| x);
            }
            &Op::Sum(a) => {
                let gv = gd[0];
                let slot = self.slot(grads, a);
                slot.data_mut().iter_mut().for_each(|s| *s += gv);
            }
            &Op::Mean(a) => {
                let n = F::from_usize(self.value(a).numel().max(1)).unwrap();
                let gv = gd[0] / n;
                let slot = self.slot(grads, a);
                slot.data_mut().iter_mut().for_each(|s| *s += gv);
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<F>>], v: Var) -> &'g mut Tensor<F> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: &[F], f: impl Fn(F) -> F) {
        if !self.ng(v) {
            return;
        }
        let slot = self.slot(grads, v);
        for (s, &x) in slot.data_mut().iter_mut().zip(g) {
            *s += f(x);
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

const GELU_C: f64 = 0.044715;

/// Tanh-approximation GELU written as `x · sigmoid(2u)`, `u = √(2/π)(x + c·x³)`.
fn gelu_sigmoid<F: Real>(x: F) -> F {
    let k2 = F::lit(2.0 * (2.0 / std::f64::consts::PI).sqrt());
    sigmoid(k2 * (x + F::lit(GELU_C) * x * x * x))
}
