//! Prompt-enriched causal transformer over item sequences.
//!
//! Per position `i` the item embedding `e_i` is fused with both prompt banks
//! through a learned softmax over the `2L+1` context slots; the fused rows go
//! through a post-norm causal transformer and a linear item classifier.
//!
//! Padding never enters the computation: padded batches are reduced to their
//! real suffix before the network runs and positions are counted from the
//! first real item, so left-padding cannot change any output.

mod layers;
mod network;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::promptbank::PromptBank;
use crate::tensor::{log_sum_exp, softmax_in_place, Matrix, Real};

pub(crate) use network::{backward_sequence, dropout_mask, forward_sequence, sequence_loss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub max_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width; `0` means `4 * dim`.
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            max_len: 15,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 0,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn ffn_width(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.dim
        } else {
            self.ffn_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.max_len == 0 || self.n_heads == 0 {
            return Err(Error::Argument("dim, max_len and n_heads must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::Argument(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub wq: Matrix<T>,
    pub bq: Matrix<T>,
    pub wk: Matrix<T>,
    pub bk: Matrix<T>,
    pub wv: Matrix<T>,
    pub bv: Matrix<T>,
    pub wo: Matrix<T>,
    pub bo: Matrix<T>,
    pub ln1_gamma: Matrix<T>,
    pub ln1_beta: Matrix<T>,
    pub ff_w1: Matrix<T>,
    pub ff_b1: Matrix<T>,
    pub ff_w2: Matrix<T>,
    pub ff_b2: Matrix<T>,
    pub ln2_gamma: Matrix<T>,
    pub ln2_beta: Matrix<T>,
}

/// All sequence-model parameters. Item index 0 is the padding slot; head
/// row `k` scores item index `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub item_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    /// `f_att` first layer, `d × 2d`.
    pub att_w1: Matrix<T>,
    pub att_b1: Matrix<T>,
    /// `f_att` output layer, `1 × d`.
    pub att_w2: Matrix<T>,
    pub att_b2: Matrix<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub head_w: Matrix<T>,
    pub head_b: Matrix<T>,
}

fn normal_matrix<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches")
}

fn xavier<T: Real>(out: usize, inp: usize, rng: &mut impl Rng) -> Matrix<T> {
    normal_matrix(out, inp, (2.0 / (out + inp) as f64).sqrt(), rng)
}

impl<T: Real> EncoderLayer<T> {
    fn init(d: usize, f: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: xavier(d, d, rng),
            bq: Matrix::zeros(1, d),
            wk: xavier(d, d, rng),
            bk: Matrix::zeros(1, d),
            wv: xavier(d, d, rng),
            bv: Matrix::zeros(1, d),
            wo: xavier(d, d, rng),
            bo: Matrix::zeros(1, d),
            ln1_gamma: Matrix::filled(1, d, T::one()),
            ln1_beta: Matrix::zeros(1, d),
            ff_w1: xavier(f, d, rng),
            ff_b1: Matrix::zeros(1, f),
            ff_w2: xavier(d, f, rng),
            ff_b2: Matrix::zeros(1, d),
            ln2_gamma: Matrix::filled(1, d, T::one()),
            ln2_beta: Matrix::zeros(1, d),
        }
    }

    fn tensors(&self) -> [(&'static str, &Matrix<T>); 16] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("ff_w1", &self.ff_w1),
            ("ff_b1", &self.ff_b1),
            ("ff_w2", &self.ff_w2),
            ("ff_b2", &self.ff_b2),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix<T>); 16] {
        [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln1_gamma", &mut self.ln1_gamma),
            ("ln1_beta", &mut self.ln1_beta),
            ("ff_w1", &mut self.ff_w1),
            ("ff_b1", &mut self.ff_b1),
            ("ff_w2", &mut self.ff_w2),
            ("ff_b2", &mut self.ff_b2),
            ("ln2_gamma", &mut self.ln2_gamma),
            ("ln2_beta", &mut self.ln2_beta),
        ]
    }
}

impl<T: Real> ModelState<T> {
    pub fn new(config: ModelConfig, n_items: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if n_items == 0 {
            return Err(Error::Argument("item vocabulary is empty".into()));
        }
        let d = config.dim;
        let emb_std = 1.0 / (d as f64).sqrt();
        let mut item_emb = normal_matrix(n_items + 1, d, emb_std, rng);
        item_emb.row_mut(0).fill(T::zero());
        let pos_emb = normal_matrix(config.max_len, d, emb_std, rng);
        let att_w1 = xavier(d, 2 * d, rng);
        let att_w2 = xavier(1, d, rng);
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer::init(d, config.ffn_width(), rng))
            .collect();
        let head_w = normal_matrix(n_items, d, emb_std, rng);
        Ok(Self {
            item_emb,
            pos_emb,
            att_w1,
            att_b1: Matrix::zeros(1, d),
            att_w2,
            att_b2: Matrix::zeros(1, 1),
            layers,
            head_w,
            head_b: Matrix::zeros(1, n_items),
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Number of real items `|V|`.
    pub fn num_items(&self) -> usize {
        self.head_w.rows()
    }

    /// Same architecture with every tensor zeroed (gradient buffers).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.fill(T::zero());
        }
        out
    }

    /// Named tensors in a fixed order shared by the optimizer and checkpoints.
    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![
            ("item_emb".to_string(), &self.item_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("att_w1".to_string(), &self.att_w1),
            ("att_b1".to_string(), &self.att_b1),
            ("att_w2".to_string(), &self.att_w2),
            ("att_b2".to_string(), &self.att_b2),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors().into_iter().map(|(n, t)| (format!("layer{i}.{n}"), t)));
        }
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = vec![
            ("item_emb".to_string(), &mut self.item_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
            ("att_w1".to_string(), &mut self.att_w1),
            ("att_b1".to_string(), &mut self.att_b1),
            ("att_w2".to_string(), &mut self.att_w2),
            ("att_b2".to_string(), &mut self.att_b2),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.tensors_mut().into_iter().map(|(n, t)| (format!("layer{i}.{n}"), t)));
        }
        out.push(("head_w".to_string(), &mut self.head_w));
        out.push(("head_b".to_string(), &mut self.head_b));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| EncoderLayer {
                wq: l.wq.cast(),
                bq: l.bq.cast(),
                wk: l.wk.cast(),
                bk: l.bk.cast(),
                wv: l.wv.cast(),
                bv: l.bv.cast(),
                wo: l.wo.cast(),
                bo: l.bo.cast(),
                ln1_gamma: l.ln1_gamma.cast(),
                ln1_beta: l.ln1_beta.cast(),
                ff_w1: l.ff_w1.cast(),
                ff_b1: l.ff_b1.cast(),
                ff_w2: l.ff_w2.cast(),
                ff_b2: l.ff_b2.cast(),
                ln2_gamma: l.ln2_gamma.cast(),
                ln2_beta: l.ln2_beta.cast(),
            })
            .collect();
        ModelState {
            config: self.config.clone(),
            item_emb: self.item_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            att_w1: self.att_w1.cast(),
            att_b1: self.att_b1.cast(),
            att_w2: self.att_w2.cast(),
            att_b2: self.att_b2.cast(),
            layers,
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }

    /// Keeps only the given item indices (1-based), renumbered in order.
    pub fn restrict_vocab(&self, items: &[usize]) -> Result<Self> {
        if let Some(&bad) = items.iter().find(|&&i| i == 0 || i > self.num_items()) {
            return Err(Error::Argument(format!("item index {bad} outside 1..={}", self.num_items())));
        }
        let mut emb_rows = vec![0];
        emb_rows.extend_from_slice(items);
        let head_rows: Vec<usize> = items.iter().map(|i| i - 1).collect();
        let mut out = self.clone();
        out.item_emb = self.item_emb.select_rows(&emb_rows);
        out.head_w = self.head_w.select_rows(&head_rows);
        let bias = Matrix::from_vec(1, self.num_items(), self.head_b.as_slice().to_vec())?;
        let picked: Vec<T> = head_rows.iter().map(|&r| bias.get(0, r)).collect();
        out.head_b = Matrix::from_vec(1, items.len(), picked)?;
        Ok(out)
    }

    pub(crate) fn check_banks(&self, shared: &PromptBank<T>, spec: &PromptBank<T>) -> Result<()> {
        if shared.len() != spec.len() {
            return Err(Error::Shape(format!(
                "prompt lengths differ: shared {} vs specific {}",
                shared.len(),
                spec.len()
            )));
        }
        if shared.dim() != self.dim() || spec.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "prompt dim {}/{} does not match model dim {}",
                shared.dim(),
                spec.dim(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Gradient buffers for every trainable tensor, banks included.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub model: ModelState<T>,
    pub shared: Matrix<T>,
    pub spec: Matrix<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(model: &ModelState<T>, shared: &PromptBank<T>, spec: &PromptBank<T>) -> Self {
        Self {
            model: model.zeros_like(),
            shared: shared.values.zeros_like(),
            spec: spec.values.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.model.tensors_mut().into_iter().zip(other.model.tensors()) {
            a.add_assign(b);
        }
        self.shared.add_assign(&other.shared);
        self.spec.add_assign(&other.spec);
    }
}

/// Left-padded id matrix. `padding_mask[b][t]` is true on real items.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub item_ids: Vec<Vec<usize>>,
    pub padding_mask: Vec<Vec<bool>>,
    pub targets: Option<Vec<usize>>,
}

impl SequenceBatch {
    /// Left-pads (or keeps the most recent `max_len` items of) each sequence.
    pub fn from_sequences(seqs: &[Vec<usize>], max_len: usize) -> Result<Self> {
        let mut item_ids = Vec::with_capacity(seqs.len());
        let mut padding_mask = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Argument("sequence without items".into()));
            }
            let tail = &s[s.len().saturating_sub(max_len)..];
            let pad = max_len - tail.len();
            let mut ids = vec![0; pad];
            ids.extend_from_slice(tail);
            let mut mask = vec![false; pad];
            mask.extend(std::iter::repeat_n(true, tail.len()));
            item_ids.push(ids);
            padding_mask.push(mask);
        }
        Ok(Self {
            item_ids,
            padding_mask,
            targets: None,
        })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    /// Width `N` of the padded rows.
    pub fn width(&self) -> usize {
        self.item_ids.first().map_or(0, Vec::len)
    }

    /// Checks the padding contract and returns the real suffix of each row.
    pub fn real_rows(&self, n_items: usize) -> Result<Vec<Vec<usize>>> {
        let width = self.width();
        let mut out = Vec::with_capacity(self.len());
        for (b, (ids, mask)) in self.item_ids.iter().zip(&self.padding_mask).enumerate() {
            if ids.len() != width || mask.len() != width {
                return Err(Error::Shape(format!("batch row {b} has ragged width")));
            }
            let first = mask.iter().position(|&m| m).ok_or_else(|| {
                Error::Argument(format!("batch row {b} contains only padding"))
            })?;
            if !mask[first..].iter().all(|&m| m) {
                return Err(Error::Argument(format!("batch row {b} is not left-padded")));
            }
            if ids[..first].iter().any(|&i| i != 0) {
                return Err(Error::Argument(format!("batch row {b} has a non-zero id under padding")));
            }
            if let Some(&bad) = ids[first..].iter().find(|&&i| i == 0 || i > n_items) {
                return Err(Error::Argument(format!("item index {bad} out of range 1..={n_items}")));
            }
            out.push(ids[first..].to_vec());
        }
        Ok(out)
    }
}

/// Gathers the real rows of a padded `N×d` block.
fn unpad<T: Real>(block: &Matrix<T>, mask: &[bool]) -> Matrix<T> {
    let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    block.select_rows(&rows)
}

/// Scatters `n` real rows back into a zero-padded `N×d` block.
fn pad<T: Real>(real: &Matrix<T>, width: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(width, real.cols());
    let offset = width - real.rows();
    for r in 0..real.rows() {
        out.row_mut(offset + r).copy_from_slice(real.row(r));
    }
    out
}

/// `E = ItemEmb(ids) + PosEmb(positions)`, optionally with inverted
/// dropout; padding rows are zero.
pub fn embed_sequence<T: Real>(
    state: &ModelState<T>,
    batch: &SequenceBatch,
    dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<Vec<Matrix<T>>> {
    let rows = batch.real_rows(state.num_items())?;
    let width = batch.width();
    if width > state.config.max_len {
        return Err(Error::Argument(format!(
            "batch width {width} exceeds max length {}",
            state.config.max_len
        )));
    }
    let mut rng = dropout_rng;
    let mut out = Vec::with_capacity(rows.len());
    for ids in &rows {
        let mask = match rng.as_deref_mut() {
            Some(r) => Some(network::dropout_mask::<T>(ids.len() * state.dim(), state.config.dropout, r)),
            None => None,
        };
        let e = network::embed(state, ids, mask.as_deref());
        out.push(pad(&e, width));
    }
    Ok(out)
}

/// Fuses each item row with the prompt banks; padding rows stay zero.
pub fn enrich_items<T: Real>(
    state: &ModelState<T>,
    embedded: &[Matrix<T>],
    padding_mask: &[Vec<bool>],
    shared: &PromptBank<T>,
    spec: &PromptBank<T>,
) -> Result<Vec<Matrix<T>>> {
    state.check_banks(shared, spec)?;
    embedded
        .iter()
        .zip(padding_mask)
        .map(|(e, mask)| {
            if e.cols() != state.dim() {
                return Err(Error::Shape(format!("embedding width {} != model dim {}", e.cols(), state.dim())));
            }
            let (fused, _) = network::enrich(state, shared, spec, &unpad(e, mask));
            Ok(pad(&fused, e.rows()))
        })
        .collect()
}

/// Per-position attention weights of the fusion step (real positions only).
pub fn enrichment_weights<T: Real>(
    state: &ModelState<T>,
    embedded: &Matrix<T>,
    shared: &PromptBank<T>,
    spec: &PromptBank<T>,
) -> Result<Matrix<T>> {
    state.check_banks(shared, spec)?;
    let (_, cache) = network::enrich(state, shared, spec, embedded);
    Ok(cache.alpha)
}

/// Causal encoder. Returns the padded hidden states and `z_u`, the hidden
/// state at the last real position of each row.
pub fn encode_sequence<T: Real>(
    state: &ModelState<T>,
    enriched: &[Matrix<T>],
    padding_mask: &[Vec<bool>],
) -> Result<(Vec<Matrix<T>>, Matrix<T>)> {
    let mut hidden = Vec::with_capacity(enriched.len());
    let mut z = Matrix::zeros(enriched.len(), state.dim());
    for (b, (x, mask)) in enriched.iter().zip(padding_mask).enumerate() {
        if !mask.iter().any(|&m| m) {
            return Err(Error::Argument(format!("batch row {b} contains only padding")));
        }
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite enriched input in row {b}")));
        }
        let h = network::encode(state, &unpad(x, mask));
        z.row_mut(b).copy_from_slice(h.row(h.rows() - 1));
        hidden.push(pad(&h, x.rows()));
    }
    Ok((hidden, z))
}

/// `o = W z + b`.
pub fn logits<T: Real>(state: &ModelState<T>, z: &Matrix<T>) -> Matrix<T> {
    layers_logits(state, z)
}

fn layers_logits<T: Real>(state: &ModelState<T>, z: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(z.rows(), state.num_items());
    for r in 0..z.rows() {
        crate::tensor::affine(&state.head_w, state.head_b.as_slice(), z.row(r), out.row_mut(r));
    }
    out
}

/// `softmax(W z + b)` per row.
pub fn predict_distribution<T: Real>(state: &ModelState<T>, z: &Matrix<T>) -> Result<Matrix<T>> {
    if !z.is_finite() {
        return Err(Error::Numeric("non-finite sequence representation".into()));
    }
    let mut o = layers_logits(state, z);
    if !o.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    for r in 0..o.rows() {
        softmax_in_place(o.row_mut(r));
    }
    Ok(o)
}

/// Softmax of an explicit logit row.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let mut v = logits.to_vec();
    softmax_in_place(&mut v);
    v
}

/// `−log p(target)` from logits.
pub fn cross_entropy<T: Real>(logits: &[T], target: usize) -> T {
    log_sum_exp(logits) - logits[target]
}

/// Eval-mode scores (logits) of every item after the given context.
pub fn score_context<T: Real>(
    state: &ModelState<T>,
    shared: &PromptBank<T>,
    spec: &PromptBank<T>,
    context: &[usize],
) -> Result<Vec<T>> {
    state.check_banks(shared, spec)?;
    if context.is_empty() {
        return Err(Error::Argument("empty context".into()));
    }
    if let Some(&bad) = context.iter().find(|&&i| i == 0 || i > state.num_items()) {
        return Err(Error::Argument(format!("item index {bad} out of range")));
    }
    let ids = &context[context.len().saturating_sub(state.config.max_len)..];
    let cache = forward_sequence(state, shared, spec, ids, None);
    let last = cache.hidden.row(cache.hidden.rows() - 1);
    let mut out = vec![T::zero(); state.num_items()];
    crate::tensor::affine(&state.head_w, state.head_b.as_slice(), last, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests;
