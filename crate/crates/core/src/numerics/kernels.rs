use super::Real;

/// `c[m×n] = alpha * op(a) @ op(b) + beta * c`.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n`
/// (or `n×k` when `trans_b`), all row-major and contiguous.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    beta: F,
    c: &mut [F],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v = if beta == F::zero() { F::zero() } else { *v * beta };
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    F::gemm_strided(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Numerically stable softmax over each row of length `cols`.
pub fn softmax_rows_in_place<F: Real>(data: &mut [F], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_mut(cols) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = F::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Normalizes each row of `x` to zero mean and unit variance (population
/// variance, `eps` inside the root). Writes the normalized rows to `out` and
/// the per-row inverse standard deviation to `inv_std`.
pub fn layer_norm_rows<F: Real>(x: &[F], d: usize, eps: F, out: &mut [F], inv_std: &mut [F]) {
    let dn = F::from_usize(d).unwrap();
    for ((row, orow), inv) in x.chunks(d).zip(out.chunks_mut(d)).zip(inv_std.iter_mut()) {
        let mean = row.iter().copied().sum::<F>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
        let s = F::one() / (var + eps).sqrt();
        *inv = s;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
}
