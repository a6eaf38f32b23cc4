//! Fixed-length soft-prompt banks initialized from relation embeddings.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{add_into, affine, dot, softmax_in_place, Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Shared,
    Specific,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Shared => "shared",
            PromptKind::Specific => "specific",
        }
    }

    fn noise_stream(self) -> Purpose {
        match self {
            PromptKind::Shared => Purpose::SharedPromptNoise,
            PromptKind::Specific => Purpose::SpecificPromptNoise,
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingStrategy {
    #[default]
    MeanNoise,
    PlainMean,
    AttentionPool,
    TransformerPool,
}

impl FromStr for PoolingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_noise" => Ok(Self::MeanNoise),
            "plain_mean" => Ok(Self::PlainMean),
            "attention_pool" => Ok(Self::AttentionPool),
            "transformer_pool" => Ok(Self::TransformerPool),
            other => Err(Error::Argument(format!("unknown prompt strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptGeneratorConfig {
    pub strategy: PoolingStrategy,
    pub prompt_len: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PromptGeneratorConfig {
    fn default() -> Self {
        Self {
            strategy: PoolingStrategy::MeanNoise,
            prompt_len: 2,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl PromptGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::Argument("prompt length must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Argument(format!("noise sigma must be non-negative, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// An `L×d` matrix of learnable prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank<T> {
    pub kind: PromptKind,
    pub values: Matrix<T>,
    pub frozen: bool,
}

impl<T: Real> PromptBank<T> {
    pub fn new(kind: PromptKind, values: Matrix<T>) -> Self {
        Self {
            kind,
            values,
            frozen: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn cast<U: Real>(&self) -> PromptBank<U> {
        PromptBank {
            kind: self.kind,
            values: self.values.cast(),
            frozen: self.frozen,
        }
    }
}

/// Aggregates `n×d` relation embeddings into an `L×d` bank.
///
/// With `mean_noise`, every row is `W_g·mean(R) + b_g + ε_l` with
/// `W_g = I`, `b_g = 0` and `ε_l ~ N(0, σ²I)` drawn independently per row.
/// An empty specific vocabulary aggregates to the zero vector.
pub fn generate_prompt_bank<T: Real>(
    relations: &Matrix<T>,
    cfg: &PromptGeneratorConfig,
    kind: PromptKind,
) -> Result<PromptBank<T>> {
    cfg.validate()?;
    let d = relations.cols();
    if relations.rows() == 0 && kind == PromptKind::Shared {
        return Err(Error::EmptyVocabulary("shared"));
    }
    let len = cfg.prompt_len;
    let mut noise_rng = rng::stream(cfg.seed, kind.noise_stream());
    let values = match cfg.strategy {
        PoolingStrategy::MeanNoise | PoolingStrategy::PlainMean => {
            let mean = relations.column_mean().unwrap_or_else(|| vec![T::zero(); d]);
            let mut w_g = Matrix::zeros(d, d);
            for i in 0..d {
                w_g.set(i, i, T::one());
            }
            let b_g = vec![T::zero(); d];
            let mut projected = vec![T::zero(); d];
            affine(&w_g, &b_g, &mean, &mut projected);
            let mut out = Matrix::zeros(len, d);
            for l in 0..len {
                out.row_mut(l).copy_from_slice(&projected);
            }
            if cfg.strategy == PoolingStrategy::MeanNoise {
                add_gaussian_noise(&mut out, cfg.noise_sigma, &mut noise_rng);
            }
            out
        }
        PoolingStrategy::AttentionPool => attention_pool(relations, len, cfg.seed, kind),
        PoolingStrategy::TransformerPool => transformer_pool(relations, len, cfg.seed, kind),
    };
    Ok(PromptBank::new(kind, values))
}

fn add_gaussian_noise<T: Real>(m: &mut Matrix<T>, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    for x in m.as_mut_slice() {
        *x += T::of(normal.sample(rng));
    }
}

fn pooling_rng(seed: u64, kind: PromptKind) -> ChaCha8Rng {
    let mut r = rng::stream(seed, Purpose::PoolingInit);
    // Distinct positions per kind inside the pooling stream.
    r.set_word_pos(if kind == PromptKind::Shared { 0 } else { 1 << 40 });
    r
}

fn gaussian_matrix<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches")
}

fn weighted_rows<T: Real>(relations: &Matrix<T>, weights: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); relations.cols()];
    for (r, &w) in weights.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(relations.row(r)) {
            *o += w * v;
        }
    }
    out
}

/// `L` random score heads, each a softmax over per-row scalar scores.
fn attention_pool<T: Real>(relations: &Matrix<T>, len: usize, seed: u64, kind: PromptKind) -> Matrix<T> {
    let d = relations.cols();
    let mut out = Matrix::zeros(len, d);
    if relations.rows() == 0 {
        return out;
    }
    let mut rng = pooling_rng(seed, kind);
    let heads: Matrix<T> = gaussian_matrix(len, d, 1.0 / (d as f64).sqrt(), &mut rng);
    for l in 0..len {
        let mut scores: Vec<T> = (0..relations.rows()).map(|r| dot(heads.row(l), relations.row(r))).collect();
        softmax_in_place(&mut scores);
        out.row_mut(l).copy_from_slice(&weighted_rows(relations, &scores));
    }
    out
}

/// One self-attention layer over the relation rows per head, then a mean.
fn transformer_pool<T: Real>(relations: &Matrix<T>, len: usize, seed: u64, kind: PromptKind) -> Matrix<T> {
    let d = relations.cols();
    let n = relations.rows();
    let mut out = Matrix::zeros(len, d);
    if n == 0 {
        return out;
    }
    let mut rng = pooling_rng(seed, kind);
    let std = 1.0 / (d as f64).sqrt();
    let scale = T::of(std);
    let zero_bias = vec![T::zero(); d];
    for l in 0..len {
        let wq: Matrix<T> = gaussian_matrix(d, d, std, &mut rng);
        let wk: Matrix<T> = gaussian_matrix(d, d, std, &mut rng);
        let wv: Matrix<T> = gaussian_matrix(d, d, std, &mut rng);
        let project = |w: &Matrix<T>| {
            let mut m = Matrix::zeros(n, d);
            for r in 0..n {
                affine(w, &zero_bias, relations.row(r), m.row_mut(r));
            }
            m
        };
        let (q, k, v) = (project(&wq), project(&wk), project(&wv));
        let mut pooled = vec![T::zero(); d];
        for i in 0..n {
            let mut att: Vec<T> = (0..n).map(|j| dot(q.row(i), k.row(j)) * scale).collect();
            softmax_in_place(&mut att);
            add_into(&mut pooled, &weighted_rows(&v, &att));
        }
        let inv = T::of(1.0 / n as f64);
        out.row_mut(l).iter_mut().zip(&pooled).for_each(|(o, &p)| *o = p * inv);
    }
    out
}

/// Builds both banks. An empty specific vocabulary falls back to the shared
/// relations so the specific bank starts near the shared mean.
pub fn build_prompt_banks<T: Real>(
    shared_relations: &Matrix<T>,
    specific_relations: &Matrix<T>,
    cfg: &PromptGeneratorConfig,
) -> Result<(PromptBank<T>, PromptBank<T>)> {
    let shared = generate_prompt_bank(shared_relations, cfg, PromptKind::Shared)?;
    let spec_source = if specific_relations.rows() == 0 {
        shared_relations
    } else {
        specific_relations
    };
    let specific = generate_prompt_bank(spec_source, cfg, PromptKind::Specific)?;
    Ok((shared, specific))
}

/// Xavier-normal bank, `std = sqrt(2 / (L + d))`.
pub fn xavier_normal_bank<T: Real>(kind: PromptKind, len: usize, dim: usize, rng: &mut impl Rng) -> PromptBank<T> {
    let std = (2.0 / (len + dim) as f64).sqrt();
    let data = (0..len * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    PromptBank::new(kind, Matrix::from_vec(len, dim, data).expect("shape matches"))
}
