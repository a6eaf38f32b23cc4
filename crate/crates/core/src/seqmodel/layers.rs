//! Forward/backward kernels for the pieces of the sequence network.
//!
//! Every kernel works on the real (non-padding) positions of one sequence,
//! stored row-major as `n×d` slices.

use crate::tensor::{add_into, affine, affine_backward, axpy, dot, softmax_in_place, Matrix, Real};

pub(crate) const LN_EPS: f64 = 1e-8;

/// Per-row layer-norm statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache<T> {
    pub normalized: Matrix<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Real>(
    input: &Matrix<T>,
    gamma: &[T],
    beta: &[T],
) -> (Matrix<T>, LayerNormCache<T>) {
    let (n, d) = input.shape();
    let mut out = Matrix::zeros(n, d);
    let mut normalized = Matrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(LN_EPS);
    for i in 0..n {
        let row = input.row(i);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        let nrow = normalized.row_mut(i);
        for k in 0..d {
            nrow[k] = (row[k] - mean) * r;
        }
        let orow = out.row_mut(i);
        for k in 0..d {
            orow[k] = gamma[k] * nrow[k] + beta[k];
        }
    }
    (out, LayerNormCache { normalized, rstd })
}

/// Returns `d input` and accumulates `d gamma`, `d beta`.
pub(crate) fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &[T],
    d_out: &Matrix<T>,
    d_gamma: &mut [T],
    d_beta: &mut [T],
) -> Matrix<T> {
    let (n, d) = d_out.shape();
    let mut d_in = Matrix::zeros(n, d);
    let inv_d = T::of(1.0 / d as f64);
    let mut d_hat = vec![T::zero(); d];
    for i in 0..n {
        let dy = d_out.row(i);
        let xh = cache.normalized.row(i);
        for k in 0..d {
            d_gamma[k] += dy[k] * xh[k];
            d_beta[k] += dy[k];
            d_hat[k] = dy[k] * gamma[k];
        }
        let mean_dh = d_hat.iter().copied().sum::<T>() * inv_d;
        let mean_dh_xh = dot(&d_hat, xh) * inv_d;
        let r = cache.rstd[i];
        let row = d_in.row_mut(i);
        for k in 0..d {
            row[k] = r * (d_hat[k] - mean_dh - xh[k] * mean_dh_xh);
        }
    }
    d_in
}

/// Row-wise affine map `out_i = W x_i + b`.
pub(crate) fn linear_rows<T: Real>(w: &Matrix<T>, b: &[T], x: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        affine(w, b, x.row(i), out.row_mut(i));
    }
    out
}

pub(crate) fn linear_rows_backward<T: Real>(
    w: &Matrix<T>,
    x: &Matrix<T>,
    d_out: &Matrix<T>,
    d_w: &mut Matrix<T>,
    d_b: &mut [T],
) -> Matrix<T> {
    let mut d_x = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        affine_backward(w, x.row(i), d_out.row(i), d_w, d_b, Some(d_x.row_mut(i)));
    }
    d_x
}

/// Causal multi-head attention probabilities: `probs[h]` is `n×n`, lower
/// triangular (entries above the diagonal are exactly zero).
pub(crate) fn causal_attention_forward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    n_heads: usize,
) -> (Matrix<T>, Vec<Matrix<T>>) {
    let (n, d) = q.shape();
    let hd = d / n_heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut ctx = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        let mut p = Matrix::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let mut scores: Vec<T> = (0..=i).map(|j| dot(qi, &k.row(j)[cols.clone()]) * scale).collect();
            softmax_in_place(&mut scores);
            let out = &mut ctx.row_mut(i)[cols.clone()];
            for (j, &pj) in scores.iter().enumerate() {
                axpy(out, pj, &v.row(j)[cols.clone()]);
            }
            p.row_mut(i)[..=i].copy_from_slice(&scores);
        }
        probs.push(p);
    }
    (ctx, probs)
}

/// Returns `(dq, dk, dv)`.
pub(crate) fn causal_attention_backward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    probs: &[Matrix<T>],
    d_ctx: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let (n, d) = q.shape();
    let n_heads = probs.len();
    let hd = d / n_heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut dp = vec![T::zero(); n];
    for (h, p) in probs.iter().enumerate() {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let dci = &d_ctx.row(i)[cols.clone()];
            let pi = &p.row(i)[..=i];
            for j in 0..=i {
                dp[j] = dot(dci, &v.row(j)[cols.clone()]);
                axpy(&mut dv.row_mut(j)[cols.clone()], pi[j], dci);
            }
            let weighted = (0..=i).map(|j| pi[j] * dp[j]).sum::<T>();
            for j in 0..=i {
                let ds = pi[j] * (dp[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                axpy(&mut dq.row_mut(i)[cols.clone()], ds, &k.row(j)[cols.clone()]);
                axpy(&mut dk.row_mut(j)[cols.clone()], ds, &q.row(i)[cols.clone()]);
            }
        }
    }
    (dq, dk, dv)
}

/// Cache of the prompt–item fusion for one sequence.
#[derive(Debug, Clone)]
pub(crate) struct EnrichCache<T> {
    /// `n·(2L+1)` rows of `f_att` hidden pre-activations (`d` wide).
    pub pre_act: Matrix<T>,
    /// `n×(2L+1)` attention weights.
    pub alpha: Matrix<T>,
}

/// Parameters of `f_att`: `2d → d → 1` with ReLU.
pub(crate) struct AttentionScorer<'a, T> {
    pub w1: &'a Matrix<T>,
    pub b1: &'a [T],
    pub w2: &'a [T],
    pub b2: T,
}

fn context_row<'a, T: Real>(shared: &'a Matrix<T>, spec: &'a Matrix<T>, item: &'a [T], j: usize) -> &'a [T] {
    let l = shared.rows();
    if j < l {
        shared.row(j)
    } else if j < 2 * l {
        spec.row(j - l)
    } else {
        item
    }
}

pub(crate) fn enrich_forward<T: Real>(
    scorer: &AttentionScorer<'_, T>,
    shared: &Matrix<T>,
    spec: &Matrix<T>,
    items: &Matrix<T>,
) -> (Matrix<T>, EnrichCache<T>) {
    let (n, d) = items.shape();
    let slots = shared.rows() + spec.rows() + 1;
    let mut out = Matrix::zeros(n, d);
    let mut pre_act = Matrix::zeros(n * slots, d);
    let mut alpha = Matrix::zeros(n, slots);
    let mut joint = vec![T::zero(); 2 * d];
    for i in 0..n {
        let item = items.row(i);
        joint[d..].copy_from_slice(item);
        let mut scores = vec![T::zero(); slots];
        for (j, s) in scores.iter_mut().enumerate() {
            joint[..d].copy_from_slice(context_row(shared, spec, item, j));
            let a = pre_act.row_mut(i * slots + j);
            affine(scorer.w1, scorer.b1, &joint, a);
            let mut acc = scorer.b2;
            for (&ak, &wk) in a.iter().zip(scorer.w2) {
                if ak > T::zero() {
                    acc += ak * wk;
                }
            }
            *s = acc;
        }
        softmax_in_place(&mut scores);
        let orow = out.row_mut(i);
        for (j, &aj) in scores.iter().enumerate() {
            axpy(orow, aj, context_row(shared, spec, item, j));
        }
        alpha.row_mut(i).copy_from_slice(&scores);
    }
    (out, EnrichCache { pre_act, alpha })
}

/// Gradient sinks for the fusion backward pass.
pub(crate) struct EnrichGrads<'a, T> {
    pub w1: &'a mut Matrix<T>,
    pub b1: &'a mut [T],
    pub w2: &'a mut [T],
    pub b2: &'a mut T,
    pub shared: &'a mut Matrix<T>,
    pub spec: &'a mut Matrix<T>,
}

/// Returns the gradient w.r.t. the item rows.
pub(crate) fn enrich_backward<T: Real>(
    scorer: &AttentionScorer<'_, T>,
    shared: &Matrix<T>,
    spec: &Matrix<T>,
    items: &Matrix<T>,
    cache: &EnrichCache<T>,
    d_out: &Matrix<T>,
    grads: &mut EnrichGrads<'_, T>,
) -> Matrix<T> {
    let (n, d) = items.shape();
    let l = shared.rows();
    let slots = 2 * l + 1;
    let mut d_items = Matrix::zeros(n, d);
    let mut joint = vec![T::zero(); 2 * d];
    let mut d_joint = vec![T::zero(); 2 * d];
    let mut d_alpha = vec![T::zero(); slots];
    let mut d_pre = vec![T::zero(); d];
    for i in 0..n {
        let item = items.row(i);
        let dy = d_out.row(i);
        let alpha = cache.alpha.row(i);
        for j in 0..slots {
            d_alpha[j] = dot(dy, context_row(shared, spec, item, j));
        }
        let weighted = dot(alpha, &d_alpha);
        joint[d..].copy_from_slice(item);
        for j in 0..slots {
            // Direct path through the convex combination.
            match j {
                j if j < l => axpy(grads.shared.row_mut(j), alpha[j], dy),
                j if j < 2 * l => axpy(grads.spec.row_mut(j - l), alpha[j], dy),
                _ => axpy(d_items.row_mut(i), alpha[j], dy),
            }
            // Path through the attention score.
            let ds = alpha[j] * (d_alpha[j] - weighted);
            *grads.b2 += ds;
            let pre = cache.pre_act.row(i * slots + j);
            for k in 0..d {
                if pre[k] > T::zero() {
                    grads.w2[k] += ds * pre[k];
                    d_pre[k] = ds * scorer.w2[k];
                } else {
                    d_pre[k] = T::zero();
                }
            }
            joint[..d].copy_from_slice(context_row(shared, spec, item, j));
            d_joint.iter_mut().for_each(|x| *x = T::zero());
            affine_backward(scorer.w1, &joint, &d_pre, grads.w1, grads.b1, Some(&mut d_joint));
            match j {
                j if j < l => add_into(grads.shared.row_mut(j), &d_joint[..d]),
                j if j < 2 * l => add_into(grads.spec.row_mut(j - l), &d_joint[..d]),
                _ => add_into(d_items.row_mut(i), &d_joint[..d]),
            }
            add_into(d_items.row_mut(i), &d_joint[d..]);
        }
    }
    d_items
}
