//! Checkpoint directories: `manifest.toml` plus one little-endian `f32`
//! file per tensor under `params/`, `adam_m/` and `adam_v/`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::{Stage, TrainConfig};
use crate::corpus::ItemVocabulary;
use crate::error::{Error, Result};
use crate::io::{read_f32_array, read_toml, write_f32_array, write_toml};
use crate::promptbank::{PromptBank, PromptKind};
use crate::rng::RngState;
use crate::seqmodel::{ModelConfig, ModelState};
use crate::tensor::Matrix;

pub const CHECKPOINT_FORMAT: &str = "kgbridge-checkpoint/1";

/// Complete training state; enough to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: TrainConfig,
    pub model: ModelState<f32>,
    pub shared: PromptBank<f32>,
    pub spec: PromptBank<f32>,
    pub optimizer: Adam<f32>,
    pub vocab: ItemVocabulary,
    /// Completed epochs.
    pub epoch: usize,
    pub best_epoch: Option<usize>,
    pub best_valid_metric: Option<f64>,
    pub shuffle_rng: RngState,
    pub dropout_rng: RngState,
    pub loss_history: Vec<f64>,
    pub valid_history: Vec<f64>,
}

impl Checkpoint {
    /// Named tensors in optimizer order: model tensors, then both banks.
    pub fn tensors(&self) -> Vec<(String, &Matrix<f32>)> {
        let mut out = self.model.tensors();
        out.push(("shared_bank".into(), &self.shared.values));
        out.push(("spec_bank".into(), &self.spec.values));
        out
    }

    pub(crate) fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|(_, t)| t.shape()).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BankEntry {
    kind: PromptKind,
    frozen: bool,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    stage: Stage,
    epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    best_valid_metric: Option<f64>,
    shuffle_rng: RngState,
    dropout_rng: RngState,
    optimizer_step: u64,
    learning_rate: f64,
    loss_history: Vec<f64>,
    valid_history: Vec<f64>,
    vocab: ItemVocabulary,
    model: ModelConfig,
    train: TrainConfig,
    shared_bank: BankEntry,
    spec_bank: BankEntry,
    tensors: Vec<TensorEntry>,
}

fn file_name(name: &str) -> String {
    format!("{name}.f32")
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    for sub in ["params", "adam_m", "adam_v"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let tensors = ckpt.tensors();
    if ckpt.optimizer.m.len() != tensors.len() {
        return Err(Error::checkpoint(dir, "optimizer state does not cover every tensor"));
    }
    for (i, (name, t)) in tensors.iter().enumerate() {
        write_f32_array(&dir.join("params").join(file_name(name)), t)?;
        write_f32_array(&dir.join("adam_m").join(file_name(name)), &ckpt.optimizer.m[i])?;
        write_f32_array(&dir.join("adam_v").join(file_name(name)), &ckpt.optimizer.v[i])?;
    }
    let bank = |b: &PromptBank<f32>| BankEntry {
        kind: b.kind,
        frozen: b.frozen,
        rows: b.len(),
        cols: b.dim(),
    };
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        stage: ckpt.stage,
        epoch: ckpt.epoch,
        best_epoch: ckpt.best_epoch,
        best_valid_metric: ckpt.best_valid_metric,
        shuffle_rng: ckpt.shuffle_rng,
        dropout_rng: ckpt.dropout_rng,
        optimizer_step: ckpt.optimizer.step,
        learning_rate: ckpt.optimizer.lr,
        loss_history: ckpt.loss_history.clone(),
        valid_history: ckpt.valid_history.clone(),
        vocab: ckpt.vocab.clone(),
        model: ckpt.model.config.clone(),
        train: ckpt.config.clone(),
        shared_bank: bank(&ckpt.shared),
        spec_bank: bank(&ckpt.spec),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    write_toml(&dir.join("manifest.toml"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.toml");
    let m: Manifest = read_toml(&manifest_path)?;
    let bad = |msg: String| Error::checkpoint(&manifest_path, msg);
    if m.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unsupported format `{}`", m.format)));
    }
    m.model.validate().map_err(|e| bad(format!("model: {e}")))?;
    for (field, b) in [("shared_bank", &m.shared_bank), ("spec_bank", &m.spec_bank)] {
        if b.cols != m.model.dim {
            return Err(bad(format!("{field}.cols = {} does not match model.dim = {}", b.cols, m.model.dim)));
        }
    }
    if m.shared_bank.rows != m.spec_bank.rows {
        return Err(bad(format!(
            "shared_bank.rows = {} differs from spec_bank.rows = {}",
            m.shared_bank.rows, m.spec_bank.rows
        )));
    }

    // Expected shapes follow from the model config and vocabulary size.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model: ModelState<f32> =
        ModelState::new(m.model.clone(), m.vocab.len(), &mut rng).map_err(|e| bad(format!("model: {e}")))?;
    let mut shared = PromptBank::new(m.shared_bank.kind, Matrix::zeros(m.shared_bank.rows, m.shared_bank.cols));
    shared.frozen = m.shared_bank.frozen;
    let mut spec = PromptBank::new(m.spec_bank.kind, Matrix::zeros(m.spec_bank.rows, m.spec_bank.cols));
    spec.frozen = m.spec_bank.frozen;

    let expected: Vec<(String, (usize, usize))> = {
        let mut v: Vec<_> = model.tensors().into_iter().map(|(n, t)| (n, t.shape())).collect();
        v.push(("shared_bank".into(), shared.values.shape()));
        v.push(("spec_bank".into(), spec.values.shape()));
        v
    };
    if expected.len() != m.tensors.len() {
        return Err(bad(format!(
            "model.n_layers = {} implies {} tensors, manifest lists {}",
            m.model.n_layers,
            expected.len(),
            m.tensors.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&m.tensors) {
        if *name != entry.name {
            return Err(bad(format!("tensor `{}` listed where `{name}` was expected", entry.name)));
        }
        if *shape != (entry.rows, entry.cols) {
            return Err(bad(format!(
                "tensor `{name}`: model config (model.dim = {}) implies {}x{}, manifest records {}x{}",
                m.model.dim, shape.0, shape.1, entry.rows, entry.cols
            )));
        }
    }

    let mut adam = Adam::new(m.learning_rate, &expected.iter().map(|(_, s)| *s).collect::<Vec<_>>());
    adam.step = m.optimizer_step;
    {
        let mut targets: Vec<&mut Matrix<f32>> = model.tensors_mut().into_iter().map(|(_, t)| t).collect();
        targets.push(&mut shared.values);
        targets.push(&mut spec.values);
        for (i, ((name, (r, c)), t)) in expected.iter().zip(targets).enumerate() {
            *t = read_f32_array(&dir.join("params").join(file_name(name)), *r, *c)?;
            adam.m[i] = read_f32_array(&dir.join("adam_m").join(file_name(name)), *r, *c)?;
            adam.v[i] = read_f32_array(&dir.join("adam_v").join(file_name(name)), *r, *c)?;
        }
    }

    Ok(Checkpoint {
        stage: m.stage,
        config: m.train,
        model,
        shared,
        spec,
        optimizer: adam,
        vocab: m.vocab,
        epoch: m.epoch,
        best_epoch: m.best_epoch,
        best_valid_metric: m.best_valid_metric,
        shuffle_rng: m.shuffle_rng,
        dropout_rng: m.dropout_rng,
        loss_history: m.loss_history,
        valid_history: m.valid_history,
    })
}
