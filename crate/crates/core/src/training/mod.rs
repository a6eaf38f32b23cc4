//! Two-stage optimization: joint pretraining over every domain, then
//! target-domain fine-tuning with the shared bank frozen and a contrastive
//! penalty pulling index-aligned prompts apart from the rest.

mod checkpoint;
mod loss;
mod optim;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use loss::{disentanglement_loss, disentanglement_spec_gradient};
pub use optim::Adam;

use crate::corpus::{DatasetSplit, ItemVocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, ExclusionPolicy, Phase};
use crate::promptbank::{xavier_normal_bank, PromptBank, PromptKind};
use crate::rng::{self, Purpose, RngState};
use crate::seqmodel::{
    backward_sequence, dropout_mask, forward_sequence, sequence_loss, Gradients, ModelConfig, ModelState,
};
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    fn streams(self) -> (Purpose, Purpose) {
        match self {
            Stage::Pretrain => (Purpose::PretrainShuffle, Purpose::PretrainDropout),
            Stage::Finetune => (Purpose::FinetuneShuffle, Purpose::FinetuneDropout),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationFlag {
    NoKgInit,
    NoShared,
    NoSpec,
    NoDisen,
    NoFreeze,
}

impl AblationFlag {
    pub const ALL: [AblationFlag; 5] = [
        AblationFlag::NoKgInit,
        AblationFlag::NoShared,
        AblationFlag::NoSpec,
        AblationFlag::NoDisen,
        AblationFlag::NoFreeze,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationFlag::NoKgInit => "no_kg_init",
            AblationFlag::NoShared => "no_shared",
            AblationFlag::NoSpec => "no_spec",
            AblationFlag::NoDisen => "no_disen",
            AblationFlag::NoFreeze => "no_freeze",
        }
    }

    /// Whether the flag changes anything before fine-tuning starts.
    pub fn affects_pretraining(self) -> bool {
        matches!(self, AblationFlag::NoKgInit | AblationFlag::NoShared | AblationFlag::NoSpec)
    }
}

impl fmt::Display for AblationFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown ablation flag `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    pub ablation: BTreeSet<AblationFlag>,
    /// History masking used when ranking validation targets.
    pub exclusion: ExclusionPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            learning_rate: 1e-4,
            batch_size: 128,
            max_epochs: 200,
            patience: 10,
            dropout: 0.2,
            lambda: 0.003,
            tau: 0.2,
            seed: 0,
            ablation: BTreeSet::new(),
            exclusion: ExclusionPolicy::History,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Argument("patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Argument(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Argument(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn has(&self, flag: AblationFlag) -> bool {
        self.ablation.contains(&flag)
    }

    /// Weight of the disentanglement term actually optimized.
    pub fn effective_lambda(&self) -> f64 {
        match self.stage {
            Stage::Finetune if !self.has(AblationFlag::NoDisen) => self.lambda,
            _ => 0.0,
        }
    }

    pub fn freezes_shared(&self) -> bool {
        self.stage == Stage::Finetune && !self.has(AblationFlag::NoFreeze)
    }
}

/// Replaces relation-initialized banks with Xavier-normal draws as the
/// flags request; fine-tune-only flags leave the banks alone.
pub fn apply_ablation<T: Real>(
    flags: &BTreeSet<AblationFlag>,
    shared: PromptBank<T>,
    spec: PromptBank<T>,
    seed: u64,
) -> (PromptBank<T>, PromptBank<T>) {
    let redraw_shared = flags.contains(&AblationFlag::NoKgInit) || flags.contains(&AblationFlag::NoShared);
    let redraw_spec = flags.contains(&AblationFlag::NoKgInit) || flags.contains(&AblationFlag::NoSpec);
    let shared = if redraw_shared {
        let mut rng = rng::stream(seed, Purpose::SharedAblation);
        xavier_normal_bank(PromptKind::Shared, shared.len(), shared.dim(), &mut rng)
    } else {
        shared
    };
    let spec = if redraw_spec {
        let mut rng = rng::stream(seed, Purpose::SpecificAblation);
        xavier_normal_bank(PromptKind::Specific, spec.len(), spec.dim(), &mut rng)
    } else {
        spec
    };
    (shared, spec)
}

/// One training window: inputs and their next-item targets (same length).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
}

/// One example per user from the most recent `max_len + 1` training items.
/// Users with a single training item contribute nothing.
pub fn build_examples(splits: &[&DatasetSplit], vocab: &ItemVocabulary, max_len: usize) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for split in splits {
        for seq in &split.train_sequences {
            let ids = vocab.encode(&split.domain, &seq.items)?;
            if ids.len() < 2 {
                continue;
            }
            let window = &ids[ids.len().saturating_sub(max_len + 1)..];
            out.push(TrainingExample {
                ids: window[..window.len() - 1].to_vec(),
                targets: window[1..].to_vec(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Mean next-item cross-entropy over all real targets of the batch.
    pub rec: f64,
    pub disen: f64,
    pub lambda: f64,
    pub total: f64,
    pub n_targets: usize,
}

#[derive(Debug, Clone)]
pub struct ObjectiveEval<T> {
    pub loss: LossBreakdown,
    pub grads: Gradients<T>,
    /// Sign pattern of every ReLU input; differing patterns between two
    /// evaluations mean a kink lies between them.
    pub activation_pattern: Vec<bool>,
}

const GRAD_CHUNKS: usize = 8;

/// `L_rec + λ·L_disen` on a batch with gradients for every parameter. The
/// disentanglement gradient reaches the specific bank only.
pub fn objective<T: Real>(
    model: &ModelState<T>,
    shared: &PromptBank<T>,
    spec: &PromptBank<T>,
    batch: &[TrainingExample],
    masks: Option<&[Vec<T>]>,
    lambda: f64,
    tau: f64,
) -> Result<ObjectiveEval<T>> {
    model.check_banks(shared, spec)?;
    if let Some(m) = masks {
        if m.len() != batch.len() {
            return Err(Error::Shape(format!("{} dropout masks for {} examples", m.len(), batch.len())));
        }
    }
    for ex in batch {
        if ex.ids.is_empty() || ex.ids.len() > model.config.max_len || ex.ids.len() != ex.targets.len() {
            return Err(Error::Shape(format!(
                "example of length {} with {} targets (max length {})",
                ex.ids.len(),
                ex.targets.len(),
                model.config.max_len
            )));
        }
        let n = model.num_items();
        if let Some(&bad) = ex.ids.iter().chain(&ex.targets).find(|&&i| i > n) {
            return Err(Error::Argument(format!("item index {bad} out of range 1..={n}")));
        }
        if ex.ids.contains(&0) {
            return Err(Error::Argument("padding id inside a training window".into()));
        }
    }
    let m: usize = batch.iter().map(|e| e.targets.iter().filter(|&&t| t != 0).count()).sum();
    if m == 0 {
        return Err(Error::Argument("batch has no real targets".into()));
    }
    let scale = T::of(1.0 / m as f64);
    let chunk = batch.len().div_ceil(GRAD_CHUNKS).max(1);
    let parts: Vec<(f64, Gradients<T>, Vec<bool>)> = batch
        .par_chunks(chunk)
        .enumerate()
        .map(|(c, examples)| {
            let mut g = Gradients::zeros(model, shared, spec);
            let mut loss = 0.0;
            let mut pattern = Vec::new();
            for (k, ex) in examples.iter().enumerate() {
                let mask = masks.map(|ms| ms[c * chunk + k].clone());
                let cache = forward_sequence(model, shared, spec, &ex.ids, mask);
                let (l, _, d_hidden) = sequence_loss(model, &cache.hidden, &ex.targets, scale, &mut g.model);
                loss += l;
                pattern.extend(cache.relu_pattern());
                backward_sequence(model, shared, spec, &cache, d_hidden, &mut g);
            }
            (loss, g, pattern)
        })
        .collect();

    let mut parts = parts.into_iter();
    let (mut sum, mut grads, mut pattern) = parts.next().expect("non-empty batch");
    for (l, g, p) in parts {
        sum += l;
        grads.add_assign(&g);
        pattern.extend(p);
    }
    let rec = sum / m as f64;
    let disen = if lambda > 0.0 {
        let (value, d_spec) = disentanglement_spec_gradient(shared, spec, tau)?;
        let w = T::of(lambda);
        for (g, &d) in grads.spec.as_mut_slice().iter_mut().zip(d_spec.as_slice()) {
            *g += w * T::of(d);
        }
        value
    } else {
        0.0
    };
    Ok(ObjectiveEval {
        loss: LossBreakdown {
            rec,
            disen,
            lambda,
            total: rec + lambda * disen,
            n_targets: m,
        },
        grads,
        activation_pattern: pattern,
    })
}

/// Where a stage keeps its `last/` and `best/` checkpoints, and whether to
/// continue from them.
#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the epoch with the best validation metric.
    pub best: Checkpoint,
    /// State after the final epoch run.
    pub last: Checkpoint,
}

/// Fresh training state: Adam moments at zero, stage streams at their start.
pub fn initial_checkpoint(
    cfg: &TrainConfig,
    model: ModelState<f32>,
    shared: PromptBank<f32>,
    spec: PromptBank<f32>,
    vocab: ItemVocabulary,
) -> Result<Checkpoint> {
    cfg.validate()?;
    model.check_banks(&shared, &spec)?;
    if vocab.len() != model.num_items() {
        return Err(Error::Shape(format!(
            "vocabulary has {} items, model scores {}",
            vocab.len(),
            model.num_items()
        )));
    }
    let (shuffle, dropout) = cfg.stage.streams();
    let mut ckpt = Checkpoint {
        stage: cfg.stage,
        config: cfg.clone(),
        model,
        shared,
        spec,
        optimizer: Adam::new(cfg.learning_rate, &[]),
        vocab,
        epoch: 0,
        best_epoch: None,
        best_valid_metric: None,
        shuffle_rng: RngState::capture(&rng::stream(cfg.seed, shuffle)),
        dropout_rng: RngState::capture(&rng::stream(cfg.seed, dropout)),
        loss_history: Vec::new(),
        valid_history: Vec::new(),
    };
    ckpt.optimizer = Adam::new(cfg.learning_rate, &ckpt.tensor_shapes());
    Ok(ckpt)
}

/// Global-vocabulary model plus banks, ready for pretraining.
pub fn init_pretrain_state(
    model_cfg: &ModelConfig,
    shared: PromptBank<f32>,
    spec: PromptBank<f32>,
    splits: &[&DatasetSplit],
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    let vocab = ItemVocabulary::from_splits(splits.iter().copied());
    if vocab.is_empty() {
        return Err(Error::Argument("no items in the training splits".into()));
    }
    let mut rng = rng::stream(cfg.seed, Purpose::ModelInit);
    let model = ModelState::new(model_cfg.clone(), vocab.len(), &mut rng)?;
    let cfg = TrainConfig {
        stage: Stage::Pretrain,
        ..cfg.clone()
    };
    initial_checkpoint(&cfg, model, shared, spec, vocab)
}

/// Pooled validation NDCG@10 over the given splits.
pub fn validation_metric(ckpt: &Checkpoint, splits: &[&DatasetSplit], policy: ExclusionPolicy) -> Result<f64> {
    let mut weighted = 0.0;
    let mut users = 0;
    for split in splits {
        let ev = evaluate_model(
            &ckpt.model,
            &ckpt.shared,
            &ckpt.spec,
            &ckpt.vocab,
            split,
            Phase::Valid,
            policy,
            &[10],
            ckpt.config.seed,
        )?;
        weighted += ev.report.ndcg(10).unwrap_or(0.0) * ev.report.n_users as f64;
        users += ev.report.n_users;
    }
    Ok(if users == 0 { 0.0 } else { weighted / users as f64 })
}

fn stage_dirs(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("last"), dir.join("best"))
}

/// Runs epochs until `max_epochs` or early stopping. With `resume`, an
/// existing `last/` checkpoint in the stage directory replaces `initial`.
pub fn train_stage(initial: Checkpoint, splits: &[&DatasetSplit], cfg: &TrainConfig, opts: &StageOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut cur, mut best) = match &opts.checkpoint_dir {
        Some(dir) if opts.resume && stage_dirs(dir).0.join("manifest.toml").exists() => {
            let (last_dir, best_dir) = stage_dirs(dir);
            let cur = load_checkpoint(&last_dir)?;
            let best = if best_dir.join("manifest.toml").exists() {
                load_checkpoint(&best_dir)?
            } else {
                cur.clone()
            };
            info!("{}: resuming after epoch {}", cfg.stage, cur.epoch);
            (cur, best)
        }
        _ => (initial.clone(), initial),
    };
    if cur.stage != cfg.stage {
        return Err(Error::Argument(format!("checkpoint is from stage {}, config says {}", cur.stage, cfg.stage)));
    }
    cur.config = cfg.clone();
    best.config = cfg.clone();
    cur.optimizer.lr = cfg.learning_rate;

    let examples = build_examples(splits, &cur.vocab, cur.model.config.max_len)?;
    if examples.is_empty() {
        return Err(Error::Argument("no training windows: every sequence has fewer than two training items".into()));
    }
    let lambda = cfg.effective_lambda();
    let frozen_shared = cfg.freezes_shared();
    cur.shared.frozen = frozen_shared;
    let mut shuffle_rng = cur.shuffle_rng.restore();
    let mut dropout_rng = cur.dropout_rng.restore();
    let dim = cur.model.dim();

    while cur.epoch < cfg.max_epochs {
        if let Some(b) = cur.best_epoch {
            if cur.epoch - b >= cfg.patience {
                break;
            }
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainingExample> = idx.iter().map(|&i| examples[i].clone()).collect();
            let masks: Option<Vec<Vec<f32>>> = (cfg.dropout > 0.0).then(|| {
                batch
                    .iter()
                    .map(|ex| dropout_mask(ex.ids.len() * dim, cfg.dropout, &mut dropout_rng))
                    .collect()
            });
            let eval = objective(&cur.model, &cur.shared, &cur.spec, &batch, masks.as_deref(), lambda, cfg.tau)?;
            let loss = eval.loss.total;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: cur.epoch + 1,
                    step,
                    loss,
                });
            }
            apply_update(&mut cur, &eval.grads, frozen_shared)?;
            epoch_loss += loss;
            steps += 1;
        }
        cur.epoch += 1;
        cur.loss_history.push(epoch_loss / steps as f64);
        let metric = validation_metric(&cur, splits, cfg.exclusion)?;
        if !metric.is_finite() {
            return Err(Error::Numeric(format!("validation metric {metric} at epoch {}", cur.epoch)));
        }
        cur.valid_history.push(metric);
        cur.shuffle_rng = RngState::capture(&shuffle_rng);
        cur.dropout_rng = RngState::capture(&dropout_rng);
        let improved = cur.best_valid_metric.is_none_or(|b| metric > b);
        if improved {
            cur.best_epoch = Some(cur.epoch);
            cur.best_valid_metric = Some(metric);
            best = cur.clone();
        }
        debug!(
            "{} epoch {}: loss {:.6}, valid ndcg@10 {:.6}{}",
            cfg.stage,
            cur.epoch,
            cur.loss_history.last().copied().unwrap_or_default(),
            metric,
            if improved { " *" } else { "" }
        );
        if let Some(dir) = &opts.checkpoint_dir {
            let (last_dir, best_dir) = stage_dirs(dir);
            save_checkpoint(&cur, &last_dir)?;
            if improved {
                save_checkpoint(&best, &best_dir)?;
            }
        }
    }
    Ok(TrainOutcome { best, last: cur })
}

fn apply_update(ckpt: &mut Checkpoint, grads: &Gradients<f32>, frozen_shared: bool) -> Result<()> {
    let mut params: Vec<&mut Matrix<f32>> = ckpt.model.tensors_mut().into_iter().map(|(_, t)| t).collect();
    params.push(&mut ckpt.shared.values);
    params.push(&mut ckpt.spec.values);
    let mut g: Vec<&Matrix<f32>> = grads.model.tensors().into_iter().map(|(_, t)| t).collect();
    g.push(&grads.shared);
    g.push(&grads.spec);
    let mut frozen = vec![false; params.len()];
    let n = frozen.len();
    frozen[n - 2] = frozen_shared;
    ckpt.optimizer.update(params, g, &frozen)
}

/// Joint training over every split.
pub fn pretrain(initial: Checkpoint, splits: &[&DatasetSplit], cfg: &TrainConfig, opts: &StageOptions) -> Result<TrainOutcome> {
    if splits.is_empty() {
        return Err(Error::Argument("pretraining needs at least one split".into()));
    }
    let cfg = TrainConfig {
        stage: Stage::Pretrain,
        ..cfg.clone()
    };
    train_stage(initial, splits, &cfg, opts)
}

/// Restricts the pretrained model to the target domain's items, resets the
/// optimizer and trains on the target split alone.
pub fn prepare_finetune(pretrained: &Checkpoint, target: &DatasetSplit, cfg: &TrainConfig) -> Result<Checkpoint> {
    let (vocab, old) = pretrained.vocab.restrict(&target.domain);
    if vocab.is_empty() {
        return Err(Error::Argument(format!("pretrained vocabulary has no items of domain `{}`", target.domain)));
    }
    let model = pretrained.model.restrict_vocab(&old)?;
    let cfg = TrainConfig {
        stage: Stage::Finetune,
        ..cfg.clone()
    };
    let mut shared = pretrained.shared.clone();
    shared.frozen = cfg.freezes_shared();
    let mut spec = pretrained.spec.clone();
    spec.frozen = false;
    initial_checkpoint(&cfg, model, shared, spec, vocab)
}

pub fn finetune(pretrained: &Checkpoint, target: &DatasetSplit, cfg: &TrainConfig, opts: &StageOptions) -> Result<TrainOutcome> {
    let initial = prepare_finetune(pretrained, target, cfg)?;
    let cfg = TrainConfig {
        stage: Stage::Finetune,
        ..cfg.clone()
    };
    train_stage(initial, &[target], &cfg, opts)
}

/// Eval-mode objective over a whole split (no dropout).
pub fn split_objective(ckpt: &Checkpoint, split: &DatasetSplit, lambda: f64, tau: f64) -> Result<LossBreakdown> {
    let examples = build_examples(&[split], &ckpt.vocab, ckpt.model.config.max_len)?;
    Ok(objective(&ckpt.model, &ckpt.shared, &ckpt.spec, &examples, None, lambda, tau)?.loss)
}
