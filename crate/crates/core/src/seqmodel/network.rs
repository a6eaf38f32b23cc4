use rand::Rng;

use super::layers::{
    causal_attention_backward, causal_attention_forward, enrich_backward, enrich_forward, layer_norm_backward,
    layer_norm_forward, linear_rows, linear_rows_backward, AttentionScorer, EnrichCache, EnrichGrads,
    LayerNormCache,
};
use super::{EncoderLayer, Gradients, ModelState};
use crate::promptbank::PromptBank;
use crate::tensor::{add_into, affine, affine_backward, log_sum_exp, softmax_in_place, Matrix, Real};

/// Inverted-dropout multipliers (`0` or `1/(1-p)`).
pub(crate) fn dropout_mask<T: Real>(len: usize, p: f64, rng: &mut impl Rng) -> Vec<T> {
    if p == 0.0 {
        return vec![T::one(); len];
    }
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

pub(crate) fn embed<T: Real>(state: &ModelState<T>, ids: &[usize], mask: Option<&[T]>) -> Matrix<T> {
    let d = state.dim();
    let mut e = Matrix::zeros(ids.len(), d);
    for (pos, &id) in ids.iter().enumerate() {
        let row = e.row_mut(pos);
        row.copy_from_slice(state.item_emb.row(id));
        add_into(row, state.pos_emb.row(pos));
        if let Some(m) = mask {
            for (x, &k) in row.iter_mut().zip(&m[pos * d..(pos + 1) * d]) {
                *x *= k;
            }
        }
    }
    e
}

fn scorer<T: Real>(state: &ModelState<T>) -> AttentionScorer<'_, T> {
    AttentionScorer {
        w1: &state.att_w1,
        b1: state.att_b1.as_slice(),
        w2: state.att_w2.as_slice(),
        b2: state.att_b2.as_slice()[0],
    }
}

pub(crate) fn enrich<T: Real>(
    state: &ModelState<T>,
    shared: &PromptBank<T>,
    spec: &PromptBank<T>,
    items: &Matrix<T>,
) -> (Matrix<T>, EnrichCache<T>) {
    enrich_forward(&scorer(state), &shared.values, &spec.values, items)
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    input: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    ctx: Matrix<T>,
    ln1: LayerNormCache<T>,
    y1: Matrix<T>,
    ff_pre: Matrix<T>,
    ff_act: Matrix<T>,
    ln2: LayerNormCache<T>,
}

fn layer_forward<T: Real>(layer: &EncoderLayer<T>, n_heads: usize, x: &Matrix<T>) -> (Matrix<T>, LayerCache<T>) {
    let q = linear_rows(&layer.wq, layer.bq.as_slice(), x);
    let k = linear_rows(&layer.wk, layer.bk.as_slice(), x);
    let v = linear_rows(&layer.wv, layer.bv.as_slice(), x);
    let (ctx, probs) = causal_attention_forward(&q, &k, &v, n_heads);
    let mut u1 = linear_rows(&layer.wo, layer.bo.as_slice(), &ctx);
    u1.add_assign(x);
    let (y1, ln1) = layer_norm_forward(&u1, layer.ln1_gamma.as_slice(), layer.ln1_beta.as_slice());
    let ff_pre = linear_rows(&layer.ff_w1, layer.ff_b1.as_slice(), &y1);
    let mut ff_act = ff_pre.clone();
    ff_act.as_mut_slice().iter_mut().for_each(|a| *a = a.max(T::zero()));
    let mut u2 = linear_rows(&layer.ff_w2, layer.ff_b2.as_slice(), &ff_act);
    u2.add_assign(&y1);
    let (y2, ln2) = layer_norm_forward(&u2, layer.ln2_gamma.as_slice(), layer.ln2_beta.as_slice());
    let cache = LayerCache {
        input: x.clone(),
        q,
        k,
        v,
        probs,
        ctx,
        ln1,
        y1,
        ff_pre,
        ff_act,
        ln2,
    };
    (y2, cache)
}

fn layer_backward<T: Real>(
    layer: &EncoderLayer<T>,
    cache: &LayerCache<T>,
    d_out: &Matrix<T>,
    g: &mut EncoderLayer<T>,
) -> Matrix<T> {
    let d_u2 = layer_norm_backward(
        &cache.ln2,
        layer.ln2_gamma.as_slice(),
        d_out,
        g.ln2_gamma.as_mut_slice(),
        g.ln2_beta.as_mut_slice(),
    );
    let mut d_act = linear_rows_backward(&layer.ff_w2, &cache.ff_act, &d_u2, &mut g.ff_w2, g.ff_b2.as_mut_slice());
    for (da, &pre) in d_act.as_mut_slice().iter_mut().zip(cache.ff_pre.as_slice()) {
        if pre <= T::zero() {
            *da = T::zero();
        }
    }
    let mut d_y1 = linear_rows_backward(&layer.ff_w1, &cache.y1, &d_act, &mut g.ff_w1, g.ff_b1.as_mut_slice());
    d_y1.add_assign(&d_u2);
    let d_u1 = layer_norm_backward(
        &cache.ln1,
        layer.ln1_gamma.as_slice(),
        &d_y1,
        g.ln1_gamma.as_mut_slice(),
        g.ln1_beta.as_mut_slice(),
    );
    let d_ctx = linear_rows_backward(&layer.wo, &cache.ctx, &d_u1, &mut g.wo, g.bo.as_mut_slice());
    let (dq, dk, dv) = causal_attention_backward(&cache.q, &cache.k, &cache.v, &cache.probs, &d_ctx);
    let mut d_x = d_u1;
    d_x.add_assign(&linear_rows_backward(&layer.wq, &cache.input, &dq, &mut g.wq, g.bq.as_mut_slice()));
    d_x.add_assign(&linear_rows_backward(&layer.wk, &cache.input, &dk, &mut g.wk, g.bk.as_mut_slice()));
    d_x.add_assign(&linear_rows_backward(&layer.wv, &cache.input, &dv, &mut g.wv, g.bv.as_mut_slice()));
    d_x
}

pub(crate) fn encode<T: Real>(state: &ModelState<T>, x: &Matrix<T>) -> Matrix<T> {
    let mut h = x.clone();
    for layer in &state.layers {
        h = layer_forward(layer, state.config.n_heads, &h).0;
    }
    h
}

/// Everything the backward pass needs for one sequence.
#[derive(Debug, Clone)]
pub(crate) struct SequenceCache<T> {
    pub ids: Vec<usize>,
    pub dropout: Option<Vec<T>>,
    pub embedded: Matrix<T>,
    pub enrich: EnrichCache<T>,
    pub layers: Vec<LayerCache<T>>,
    pub hidden: Matrix<T>,
}

impl<T: Real> SequenceCache<T> {
    /// Signs of every ReLU pre-activation; equal patterns mean no kink was
    /// crossed between two evaluations.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out: Vec<bool> = self.enrich.pre_act.as_slice().iter().map(|&x| x > T::zero()).collect();
        for l in &self.layers {
            out.extend(l.ff_pre.as_slice().iter().map(|&x| x > T::zero()));
        }
        out
    }
}

/// Runs one real (unpadded) sequence of length `n ≤ max_len`.
pub(crate) fn forward_sequence<T: Real>(
    state: &ModelState<T>,
    shared: &PromptBank<T>,
    spec: &PromptBank<T>,
    ids: &[usize],
    dropout: Option<Vec<T>>,
) -> SequenceCache<T> {
    debug_assert!(!ids.is_empty() && ids.len() <= state.config.max_len);
    let embedded = embed(state, ids, dropout.as_deref());
    let (mut h, enrich_cache) = enrich(state, shared, spec, &embedded);
    let mut layer_caches = Vec::with_capacity(state.layers.len());
    for layer in &state.layers {
        let (next, c) = layer_forward(layer, state.config.n_heads, &h);
        layer_caches.push(c);
        h = next;
    }
    SequenceCache {
        ids: ids.to_vec(),
        dropout,
        embedded,
        enrich: enrich_cache,
        layers: layer_caches,
        hidden: h,
    }
}

/// Summed next-item cross-entropy over positions with a real target
/// (`targets[i] == 0` marks "no target"). Head gradients are accumulated
/// with weight `scale`; returns `(loss_sum, n_targets, d_hidden)`.
pub(crate) fn sequence_loss<T: Real>(
    state: &ModelState<T>,
    hidden: &Matrix<T>,
    targets: &[usize],
    scale: T,
    grads: &mut ModelState<T>,
) -> (f64, usize, Matrix<T>) {
    let n_items = state.num_items();
    let mut d_hidden = Matrix::zeros(hidden.rows(), hidden.cols());
    let mut logits = vec![T::zero(); n_items];
    let mut total = 0.0;
    let mut count = 0;
    for (i, &target) in targets.iter().enumerate() {
        if target == 0 {
            continue;
        }
        let col = target - 1;
        affine(&state.head_w, state.head_b.as_slice(), hidden.row(i), &mut logits);
        total += (log_sum_exp(&logits) - logits[col]).as_f64();
        count += 1;
        softmax_in_place(&mut logits);
        logits[col] -= T::one();
        logits.iter_mut().for_each(|g| *g *= scale);
        affine_backward(
            &state.head_w,
            hidden.row(i),
            &logits,
            &mut grads.head_w,
            grads.head_b.as_mut_slice(),
            Some(d_hidden.row_mut(i)),
        );
    }
    (total, count, d_hidden)
}

/// Backpropagates `d_hidden` through the encoder, fusion and embeddings.
pub(crate) fn backward_sequence<T: Real>(
    state: &ModelState<T>,
    shared: &PromptBank<T>,
    spec: &PromptBank<T>,
    cache: &SequenceCache<T>,
    d_hidden: Matrix<T>,
    grads: &mut Gradients<T>,
) {
    let mut d = d_hidden;
    for (l, layer) in state.layers.iter().enumerate().rev() {
        d = layer_backward(layer, &cache.layers[l], &d, &mut grads.model.layers[l]);
    }
    let mut b2 = T::zero();
    let mut sinks = EnrichGrads {
        w1: &mut grads.model.att_w1,
        b1: grads.model.att_b1.as_mut_slice(),
        w2: grads.model.att_w2.as_mut_slice(),
        b2: &mut b2,
        shared: &mut grads.shared,
        spec: &mut grads.spec,
    };
    let mut d_emb = enrich_backward(
        &scorer(state),
        &shared.values,
        &spec.values,
        &cache.embedded,
        &cache.enrich,
        &d,
        &mut sinks,
    );
    grads.model.att_b2.as_mut_slice()[0] += b2;
    let dim = state.dim();
    if let Some(mask) = &cache.dropout {
        for (g, &m) in d_emb.as_mut_slice().iter_mut().zip(mask) {
            *g *= m;
        }
    }
    for (pos, &id) in cache.ids.iter().enumerate() {
        let g = d_emb.row(pos);
        add_into(&mut grads.model.item_emb.as_mut_slice()[id * dim..(id + 1) * dim], g);
        add_into(grads.model.pos_emb.row_mut(pos), g);
    }
}
