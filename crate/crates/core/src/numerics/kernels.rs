//! Plain slice kernels shared by the tape and by tape-free inference paths.
//! All matrices are dense row-major.

use super::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// `out (m×n) = op(a) · op(b)`, accumulating into `out` when `accumulate`.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n`
/// (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<F: Scalar>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm(m, k, n, F::one(), a, rsa, csa, b, rsb, csb, beta, out, n as isize, 1);
}

pub fn add_bias<F: Scalar>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

/// Row-wise layer normalization; returns per-row `(mean, rstd)` for the
/// backward pass.
pub fn layer_norm<F: Scalar>(x: &[F], gain: &[F], bias: &[F], out: &mut [F]) -> Vec<(F, F)> {
    let d = gain.len();
    let eps = F::of(LN_EPS);
    let inv_d = F::one() / F::of(d as f64);
    let mut stats = Vec::with_capacity(x.len() / d);
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rstd = F::one() / (var + eps).sqrt();
        for i in 0..d {
            orow[i] = (row[i] - mean) * rstd * gain[i] + bias[i];
        }
        stats.push((mean, rstd));
    }
    stats
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + F::of(3.0) * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

/// In-place numerically stable softmax of one slice.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        row.iter_mut().for_each(|v| *v = F::zero());
        return;
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// `log(sum(exp(row)))`, stable.
pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Geometry of a batched multi-head attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub d_model: usize,
    pub causal: bool,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Scaled dot-product attention over `[batch*len, d_model]` row blocks.
///
/// `key_valid` (length `batch*k_len`) masks out keys; a query row whose
/// keys are all masked produces zeros. Returns the attention weights laid
/// out `[batch, heads, q_len, k_len]`.
pub fn attention_forward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    key_valid: Option<&[bool]>,
    s: AttnShape,
    out: &mut [F],
) -> Vec<F> {
    let dh = s.head_dim();
    let d = s.d_model;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut probs = vec![F::zero(); s.batch * s.heads * s.q_len * s.k_len];
    out.iter_mut().for_each(|o| *o = F::zero());
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..s.q_len {
                let qrow = &q[(b * s.q_len + i) * d + off..][..dh];
                let p = &mut probs[((b * s.heads + h) * s.q_len + i) * s.k_len..][..s.k_len];
                for (j, pj) in p.iter_mut().enumerate() {
                    let masked = (s.causal && j > i)
                        || key_valid.is_some_and(|m| !m[b * s.k_len + j]);
                    *pj = if masked {
                        F::neg_infinity()
                    } else {
                        let krow = &k[(b * s.k_len + j) * d + off..][..dh];
                        qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum::<F>() * scale
                    };
                }
                softmax_in_place(p);
                let orow = &mut out[(b * s.q_len + i) * d + off..][..dh];
                for (j, &pj) in p.iter().enumerate() {
                    if pj == F::zero() {
                        continue;
                    }
                    let vrow = &v[(b * s.k_len + j) * d + off..][..dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += pj * x;
                    }
                }
            }
        }
    }
    probs
}

/// Accumulates attention input gradients into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dout: &[F],
    s: AttnShape,
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
) {
    let dh = s.head_dim();
    let d = s.d_model;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut dp = vec![F::zero(); s.k_len];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..s.q_len {
                let p = &probs[((b * s.heads + h) * s.q_len + i) * s.k_len..][..s.k_len];
                let go = &dout[(b * s.q_len + i) * d + off..][..dh];
                let mut dot = F::zero();
                for j in 0..s.k_len {
                    let vrow = &v[(b * s.k_len + j) * d + off..][..dh];
                    dp[j] = go.iter().zip(vrow).map(|(&x, &y)| x * y).sum();
                    dot += p[j] * dp[j];
                }
                let qrow = &q[(b * s.q_len + i) * d + off..][..dh];
                for j in 0..s.k_len {
                    if p[j] == F::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kbase = (b * s.k_len + j) * d + off;
                    let qbase = (b * s.q_len + i) * d + off;
                    for c in 0..dh {
                        dq[qbase + c] += ds * k[kbase + c];
                        dk[kbase + c] += ds * qrow[c];
                        dv[kbase + c] += p[j] * go[c];
                    }
                }
            }
        }
    }
}
