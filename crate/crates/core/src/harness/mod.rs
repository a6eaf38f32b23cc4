//! Experiment driver: config handling, the per-seed pipeline
//! (load → partition → KGE → prompts → pretrain → fine-tune → test), the
//! ablation suite and the sparsity and λ sweeps.

mod report;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

pub use report::{
    ablation_table_csv, mean_by_key, significance_csv, summarize_reports, sweep_csv, SweepPoint, ABLATION_RUNS_FILE,
    ABLATION_TABLE_FILE, REPORT_FILE,
};
pub use synth::{generate_synthetic_corpus, sample_sequences, SyntheticCorpus, SyntheticSpec};

use crate::corpus::{
    leave_one_out_split, load_interactions, load_item_links, load_kg_and_partition, perturb_kg_sparsity,
    shuffle_user_identities, DatasetSplit, KnowledgeGraph, LoadOptions, RelationPartition,
};
use crate::error::{Error, Result, StageExt};
use crate::evaluation::{evaluate_model, write_reports_csv, ExclusionPolicy, MetricReport, Phase, DEFAULT_KS};
use crate::io::{write_text, write_toml};
use crate::kge::{export_relation_matrices, save_kge, train_kge, KgeConfig};
use crate::promptbank::{build_prompt_banks, PromptGeneratorConfig};
use crate::seqmodel::ModelConfig;
use crate::training::{
    apply_ablation, finetune, init_pretrain_state, pretrain, AblationFlag, Checkpoint, StageOptions, TrainConfig,
};

pub const RUN_FORMAT: &str = "kgbridge-run/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPaths {
    pub interactions: PathBuf,
    pub kg: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub links: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: String,
    /// Name written in the `system` column of reports.
    pub system: String,
    pub target: String,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub ks: Vec<usize>,
    pub min_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_rating: Option<f64>,
    pub kg_sparsity: f64,
    pub ablation: BTreeSet<AblationFlag>,
    pub exclusion: ExclusionPolicy,
    pub resume: bool,
    pub domains: BTreeMap<String, DomainPaths>,
    pub kge: KgeConfig,
    pub prompt: PromptGeneratorConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: "experiment".into(),
            system: "full".into(),
            target: String::new(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs"),
            ks: DEFAULT_KS.to_vec(),
            min_len: crate::corpus::MIN_SEQUENCE_LEN,
            min_rating: None,
            kg_sparsity: 0.0,
            ablation: BTreeSet::new(),
            exclusion: ExclusionPolicy::History,
            resume: false,
            domains: BTreeMap::new(),
            kge: KgeConfig::default(),
            prompt: PromptGeneratorConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig {
                stage: crate::training::Stage::Finetune,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    /// Settings sized for the synthetic corpus on a CPU: `d = 32`,
    /// learning rate `1e-3`, batches of 32, 30 pretraining and 20
    /// fine-tuning epochs.
    pub fn desk_scale() -> Self {
        let mut cfg = Self::default();
        cfg.model.dim = 32;
        cfg.kge.dim = 32;
        for (stage, epochs) in [(&mut cfg.pretrain, 30), (&mut cfg.finetune, 20)] {
            stage.learning_rate = 1e-3;
            stage.batch_size = 32;
            stage.max_epochs = epochs;
        }
        cfg
    }

    /// Desk-scale config for a generated corpus, with paths relative to its root.
    pub fn for_corpus(corpus: &SyntheticCorpus) -> Self {
        let rel = |p: &Path| p.strip_prefix(&corpus.root).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
        let domains = corpus
            .domains
            .iter()
            .map(|(d, p)| {
                (
                    d.clone(),
                    DomainPaths {
                        interactions: rel(&p.interactions),
                        kg: rel(&p.kg),
                        links: p.links.as_deref().map(rel),
                    },
                )
            })
            .collect();
        Self {
            task: "synthetic".into(),
            target: corpus.target.clone(),
            domains,
            ..Self::desk_scale()
        }
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = crate::io::read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.rebase(&base);
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for paths in self.domains.values_mut() {
            fix(&mut paths.interactions);
            fix(&mut paths.kg);
            if let Some(l) = paths.links.as_mut() {
                fix(l);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::Argument(format!("need at least two domains, got {}", self.domains.len())));
        }
        if !self.domains.contains_key(&self.target) {
            return Err(Error::Argument(format!("target domain `{}` is not configured", self.target)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Argument("at least one seed is required".into()));
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return Err(Error::Argument(format!("seeds must be distinct: {:?}", self.seeds)));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Argument(format!("cutoffs must be positive: {:?}", self.ks)));
        }
        if !(0.0..1.0).contains(&self.kg_sparsity) {
            return Err(Error::Argument(format!("kg_sparsity must lie in [0, 1), got {}", self.kg_sparsity)));
        }
        if self.kge.dim != self.model.dim {
            return Err(Error::Argument(format!(
                "kge.dim ({}) must equal model.dim ({}) for prompts built from relations",
                self.kge.dim, self.model.dim
            )));
        }
        self.kge.validate()?;
        self.prompt.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    pub fn check_paths(&self) -> Result<()> {
        for paths in self.domains.values() {
            let mut all = vec![&paths.interactions, &paths.kg];
            all.extend(paths.links.as_ref());
            for p in all {
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "configured input file is missing"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Copy with every component seeded by `seed` and run-level settings
    /// pushed into both training stages.
    pub fn resolved(&self, seed: u64) -> Self {
        let mut r = self.clone();
        r.seeds = vec![seed];
        r.kge.seed = seed;
        r.prompt.seed = seed;
        for (stage, which) in [
            (&mut r.pretrain, crate::training::Stage::Pretrain),
            (&mut r.finetune, crate::training::Stage::Finetune),
        ] {
            stage.stage = which;
            stage.seed = seed;
            stage.ablation = self.ablation.clone();
            stage.exclusion = self.exclusion;
        }
        r
    }
}

/// Splits (identity-shuffled) plus the merged graph.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub splits: BTreeMap<String, DatasetSplit>,
    pub kg: KnowledgeGraph,
}

pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<LoadedData> {
    let opts = LoadOptions {
        min_len: cfg.min_len,
        min_rating: cfg.min_rating,
    };
    let mut splits = BTreeMap::new();
    for (domain, paths) in &cfg.domains {
        let seqs = load_interactions(&paths.interactions, domain, &opts)?;
        let mut split = leave_one_out_split(&seqs)?;
        if let Some(l) = &paths.links {
            split = split.with_links(load_item_links(l)?);
        }
        splits.insert(domain.clone(), split);
    }
    let splits = shuffle_user_identities(&splits, seed)?;
    let kg_paths = cfg.domains.iter().map(|(d, p)| (d.clone(), p.kg.clone())).collect();
    let (kg, _) = load_kg_and_partition(&kg_paths)?;
    Ok(LoadedData { splits, kg })
}

/// What the pretraining half of a run produced.
#[derive(Debug, Clone)]
pub struct PretrainArtifacts {
    pub best: Checkpoint,
    pub dir: PathBuf,
    pub kg_triples_total: usize,
    pub kg_triples_used: usize,
    pub n_shared_relations: usize,
    pub n_specific_relations: usize,
    pub kge_final_loss: f64,
    pub epochs_run: usize,
}

/// Per-seed run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format: String,
    pub system: String,
    pub seed: u64,
    pub ablation: Vec<String>,
    pub kg_sparsity: f64,
    pub kg_triples_total: usize,
    pub kg_triples_used: usize,
    pub n_shared_relations: usize,
    pub n_specific_relations: usize,
    pub kge_final_loss: f64,
    pub pretrain_dir: PathBuf,
    pub pretrain_epochs: usize,
    pub pretrain_best_epoch: usize,
    pub pretrain_best_valid_ndcg10: f64,
    pub finetune_epochs: usize,
    pub finetune_best_epoch: usize,
    pub finetune_best_valid_ndcg10: f64,
    pub lambda: f64,
    /// Frobenius norm of the shared-bank change during fine-tuning.
    pub shared_bank_drift: f64,
    pub test_users: usize,
    pub skipped_users: usize,
    pub exclusion: ExclusionPolicy,
    pub config: ExperimentConfig,
}

/// Test metrics of one run plus its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub record: RunRecord,
    pub report: MetricReport,
    pub report_other_policy: MetricReport,
}

fn stage_opts(dir: PathBuf, resume: bool) -> StageOptions {
    StageOptions {
        checkpoint_dir: Some(dir),
        resume,
    }
}

/// KGE, prompt construction, ablation substitution and pretraining for a
/// resolved (single-seed) config.
pub fn pretrain_for(cfg: &ExperimentConfig, data: &LoadedData, dir: &Path) -> Result<PretrainArtifacts> {
    let seed = cfg.kge.seed;
    let kg = if cfg.kg_sparsity > 0.0 {
        perturb_kg_sparsity(&data.kg, cfg.kg_sparsity, seed).stage("sparsity")?
    } else {
        data.kg.clone()
    };
    let partition = RelationPartition::from_graph(&kg);
    let kge = train_kge(&kg, &cfg.kge).stage("kge")?;
    save_kge(&kge, &dir.join("kge")).stage("kge")?;
    let (r_shared, r_spec) = export_relation_matrices(&kge, &partition).stage("prompt")?;
    let (shared, spec) = build_prompt_banks(&r_shared, &r_spec, &cfg.prompt).stage("prompt")?;
    let (shared, spec) = apply_ablation(&cfg.ablation, shared.cast::<f32>(), spec.cast::<f32>(), seed);

    let refs: Vec<&DatasetSplit> = data.splits.values().collect();
    let init = init_pretrain_state(&cfg.model, shared, spec, &refs, &cfg.pretrain).stage("pretrain")?;
    let out = pretrain(init, &refs, &cfg.pretrain, &stage_opts(dir.join("pretrain"), cfg.resume)).stage("pretrain")?;
    info!(
        "seed {seed}: pretrained {} epochs, best valid ndcg@10 {:.6}",
        out.last.epoch,
        out.best.best_valid_metric.unwrap_or(0.0)
    );
    Ok(PretrainArtifacts {
        best: out.best,
        dir: dir.to_path_buf(),
        kg_triples_total: data.kg.num_triples(),
        kg_triples_used: kg.num_triples(),
        n_shared_relations: partition.shared.len(),
        n_specific_relations: partition.specific.len(),
        kge_final_loss: kge.loss_history.last().copied().unwrap_or(0.0),
        epochs_run: out.last.epoch,
    })
}

/// Fine-tunes from `pre`, evaluates on the target test targets and writes
/// the run directory.
pub fn finetune_for(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    pre: &PretrainArtifacts,
    dir: &Path,
) -> Result<RunResult> {
    let seed = cfg.finetune.seed;
    let target = &data.splits[&cfg.target];
    let out = finetune(&pre.best, target, &cfg.finetune, &stage_opts(dir.join("finetune"), cfg.resume))
        .stage("finetune")?;
    let best = &out.best;
    let mut drift = best.shared.values.clone();
    drift.scale(-1.0);
    drift.add_assign(&pre.best.shared.values);
    let drift = drift.as_slice().iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();

    let eval = |policy| {
        evaluate_model(&best.model, &best.shared, &best.spec, &best.vocab, target, Phase::Test, policy, &cfg.ks, seed)
            .stage("evaluate")
    };
    let other = match cfg.exclusion {
        ExclusionPolicy::History => ExclusionPolicy::None,
        ExclusionPolicy::None => ExclusionPolicy::History,
    };
    let main = eval(cfg.exclusion)?;
    let alt = eval(other)?;

    let record = RunRecord {
        format: RUN_FORMAT.into(),
        system: cfg.system.clone(),
        seed,
        ablation: cfg.ablation.iter().map(|f| f.to_string()).collect(),
        kg_sparsity: cfg.kg_sparsity,
        kg_triples_total: pre.kg_triples_total,
        kg_triples_used: pre.kg_triples_used,
        n_shared_relations: pre.n_shared_relations,
        n_specific_relations: pre.n_specific_relations,
        kge_final_loss: pre.kge_final_loss,
        pretrain_dir: pre.dir.clone(),
        pretrain_epochs: pre.epochs_run,
        pretrain_best_epoch: pre.best.best_epoch.unwrap_or(0),
        pretrain_best_valid_ndcg10: pre.best.best_valid_metric.unwrap_or(0.0),
        finetune_epochs: out.last.epoch,
        finetune_best_epoch: best.best_epoch.unwrap_or(0),
        finetune_best_valid_ndcg10: best.best_valid_metric.unwrap_or(0.0),
        lambda: cfg.finetune.effective_lambda(),
        shared_bank_drift: drift,
        test_users: main.report.n_users,
        skipped_users: main.skipped,
        exclusion: cfg.exclusion,
        config: cfg.clone(),
    };
    write_toml(&dir.join("manifest.toml"), &record)?;
    write_reports_csv(&dir.join(policy_file(cfg.exclusion)), [(cfg.system.as_str(), &main.report)])?;
    write_reports_csv(&dir.join(policy_file(other)), [(cfg.system.as_str(), &alt.report)])?;
    Ok(RunResult {
        record,
        report: main.report,
        report_other_policy: alt.report,
    })
}

fn policy_file(policy: ExclusionPolicy) -> &'static str {
    match policy {
        ExclusionPolicy::History => "test_history_masked.csv",
        ExclusionPolicy::None => "test_unmasked.csv",
    }
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

fn prepare(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    cfg.check_paths()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_toml(&cfg.out_dir.join("config.toml"), cfg)
}

/// Full pipeline once per seed; writes `report.csv` and one directory per seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    prepare(cfg)?;
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let r = cfg.resolved(seed);
        let data = load_data(&r, seed).stage("load")?;
        let dir = seed_dir(&cfg.out_dir, seed);
        let pre = pretrain_for(&r, &data, &dir)?;
        results.push(finetune_for(&r, &data, &pre, &dir)?);
    }
    let rows: Vec<(&str, &MetricReport)> = results.iter().map(|r| (cfg.system.as_str(), &r.report)).collect();
    write_reports_csv(&cfg.out_dir.join(REPORT_FILE), rows)?;
    Ok(results)
}

/// A named set of ablation flags; `full` is the empty set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub flags: BTreeSet<AblationFlag>,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let flags = if s == "full" {
            BTreeSet::new()
        } else {
            s.split('+').map(str::parse).collect::<Result<_>>()?
        };
        Ok(Self { name: s.to_string(), flags })
    }
}

pub fn all_variants() -> Vec<Variant> {
    std::iter::once("full")
        .chain(AblationFlag::ALL.iter().map(|f| f.as_str()))
        .map(|s| s.parse().expect("known variant"))
        .collect()
}

/// One experiment per variant with shared seeds. Variants that differ only
/// in fine-tuning reuse the pretrained checkpoint of the first variant with
/// the same pretraining flags.
pub fn run_ablation(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<(String, Vec<RunResult>)>> {
    if variants.is_empty() {
        return Err(Error::Argument("no ablation variants given".into()));
    }
    prepare(cfg)?;
    let root = cfg.out_dir.join("ablation");
    let mut per_variant: Vec<(String, Vec<RunResult>)> = variants.iter().map(|v| (v.name.clone(), Vec::new())).collect();
    for &seed in &cfg.seeds {
        let mut cache: BTreeMap<Vec<AblationFlag>, PretrainArtifacts> = BTreeMap::new();
        let base = cfg.resolved(seed);
        let data = load_data(&base, seed).stage("load")?;
        for (v, slot) in variants.iter().zip(per_variant.iter_mut()) {
            let mut vc = cfg.clone();
            vc.ablation = v.flags.clone();
            vc.system = v.name.clone();
            let r = vc.resolved(seed);
            let key: Vec<AblationFlag> = v.flags.iter().copied().filter(|f| f.affects_pretraining()).collect();
            let dir = seed_dir(&root.join(&v.name), seed);
            if !cache.contains_key(&key) {
                let pre = pretrain_for(&r, &data, &dir)?;
                cache.insert(key.clone(), pre);
            }
            slot.1.push(finetune_for(&r, &data, &cache[&key], &dir)?);
        }
    }
    let runs: Vec<(&str, &MetricReport)> = per_variant
        .iter()
        .flat_map(|(name, rs)| rs.iter().map(move |r| (name.as_str(), &r.report)))
        .collect();
    write_reports_csv(&cfg.out_dir.join(ABLATION_RUNS_FILE), runs)?;
    write_text(&cfg.out_dir.join(ABLATION_TABLE_FILE), &ablation_table_csv(&cfg.task, &per_variant, &cfg.ks))?;
    if let Some((_, full)) = per_variant.iter().find(|(n, _)| n == "full") {
        let text = significance_csv(full, &per_variant)?;
        write_text(&cfg.out_dir.join("ablation_significance.csv"), &text)?;
    }
    Ok(per_variant)
}

pub const DEFAULT_RATIOS: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];
pub const DEFAULT_LAMBDAS: [f64; 4] = [0.002, 0.003, 0.004, 0.005];

/// Re-runs the whole pipeline with the graph thinned by each ratio.
pub fn run_sparsity_sweep(cfg: &ExperimentConfig, ratios: &[f64]) -> Result<Vec<SweepPoint>> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::Argument(format!("sparsity ratio must lie in [0, 1), got {r}")));
    }
    let mut ratios = ratios.to_vec();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    prepare(cfg)?;
    let mut points = Vec::new();
    for &ratio in &ratios {
        let mut vc = cfg.clone();
        vc.kg_sparsity = ratio;
        vc.system = format!("ratio_{ratio:.6}");
        let root = cfg.out_dir.join("sparsity").join(format!("ratio_{ratio:.6}"));
        let mut runs = Vec::new();
        for &seed in &cfg.seeds {
            let r = vc.resolved(seed);
            let data = load_data(&r, seed).stage("load")?;
            let dir = seed_dir(&root, seed);
            let pre = pretrain_for(&r, &data, &dir)?;
            runs.push(finetune_for(&r, &data, &pre, &dir)?);
        }
        points.push(SweepPoint { value: ratio, runs });
    }
    write_text(&cfg.out_dir.join("sparsity.csv"), &sweep_csv("ratio", &points, &cfg.ks))?;
    Ok(points)
}

/// One pretraining per seed, then one fine-tuning per λ from it.
pub fn run_lambda_sweep(cfg: &ExperimentConfig, lambdas: &[f64]) -> Result<Vec<SweepPoint>> {
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::Argument(format!("lambda must be non-negative, got {l}")));
    }
    let mut lambdas = lambdas.to_vec();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    prepare(cfg)?;
    let root = cfg.out_dir.join("lambda");
    let mut points: Vec<SweepPoint> = lambdas.iter().map(|&value| SweepPoint { value, runs: Vec::new() }).collect();
    for &seed in &cfg.seeds {
        let base = cfg.resolved(seed);
        let data = load_data(&base, seed).stage("load")?;
        let pre = pretrain_for(&base, &data, &seed_dir(&root.join("pretrain"), seed))?;
        for point in points.iter_mut() {
            let mut r = base.clone();
            r.finetune.lambda = point.value;
            r.system = format!("lambda_{:.6}", point.value);
            let dir = seed_dir(&root.join(&r.system), seed);
            point.runs.push(finetune_for(&r, &data, &pre, &dir)?);
        }
    }
    write_text(&cfg.out_dir.join("lambda.csv"), &sweep_csv("lambda", &points, &cfg.ks))?;
    Ok(points)
}

#[cfg(test)]
mod tests;
