use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kgbridge::corpus::{load_kg_and_partition, perturb_kg_sparsity};
use kgbridge::evaluation::ExclusionPolicy;
use kgbridge::harness::{
    self, all_variants, generate_synthetic_corpus, ExperimentConfig, SyntheticSpec, Variant, DEFAULT_LAMBDAS,
    DEFAULT_RATIOS,
};
use kgbridge::kge::{save_kge, train_kge};
use kgbridge::training::AblationFlag;

/// Knowledge-guided prompt learning for cross-domain sequential recommendation.
#[derive(Parser)]
#[command(name = "kgbridge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train TransE on the merged graph and save it.
    KgeTrain {
        #[command(flatten)]
        common: Common,
    },
    /// Full pipeline for the given seeds.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Ablation suite; `--variants` defaults to all six.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Re-run the pipeline with the graph thinned by each ratio.
    SweepSparsity {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
    },
    /// Fine-tune once per λ from a shared pretrained checkpoint.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
    /// Write a planted-pattern two-domain corpus and a matching config.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        /// TOML file with generator settings; flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        strength: Option<f64>,
    },
    /// Per-system means and paired p-values from a report CSV.
    Report {
        csv: PathBuf,
        #[arg(long, default_value = "full")]
        baseline: String,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated; replaces the configured seed list.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    system: Option<String>,
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    #[arg(long)]
    min_rating: Option<f64>,
    #[arg(long)]
    kg_sparsity: Option<f64>,
    /// Comma-separated ablation flags.
    #[arg(long, value_delimiter = ',')]
    ablation: Vec<String>,
    /// Rank history items too.
    #[arg(long)]
    no_history_mask: bool,
    /// Continue from checkpoints found in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("reading config {}", self.config.display()))?;
        if !self.seed.is_empty() {
            cfg.seeds = self.seed.clone();
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(t) = &self.target {
            cfg.target = t.clone();
        }
        if let Some(s) = &self.system {
            cfg.system = s.clone();
        }
        if !self.ks.is_empty() {
            cfg.ks = self.ks.clone();
        }
        if self.min_rating.is_some() {
            cfg.min_rating = self.min_rating;
        }
        if let Some(r) = self.kg_sparsity {
            cfg.kg_sparsity = r;
        }
        for f in &self.ablation {
            cfg.ablation.insert(f.parse::<AblationFlag>()?);
        }
        if self.no_history_mask {
            cfg.exclusion = ExclusionPolicy::None;
        }
        cfg.resume |= self.resume;
        if let Some(e) = self.pretrain_epochs {
            cfg.pretrain.max_epochs = e;
        }
        if let Some(e) = self.finetune_epochs {
            cfg.finetune.max_epochs = e;
        }
        if let Some(l) = self.lambda {
            cfg.finetune.lambda = l;
        }
        Ok(cfg)
    }
}

fn print_file(path: &Path) -> Result<()> {
    print!("{}", std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::KgeTrain { common } => {
            let cfg = common.resolve()?;
            cfg.validate()?;
            cfg.check_paths()?;
            let paths = cfg.domains.iter().map(|(d, p)| (d.clone(), p.kg.clone())).collect();
            let (kg, _) = load_kg_and_partition(&paths)?;
            for &seed in &cfg.seeds {
                let r = cfg.resolved(seed);
                let kg = if r.kg_sparsity > 0.0 { perturb_kg_sparsity(&kg, r.kg_sparsity, seed)? } else { kg.clone() };
                let model = train_kge(&kg, &r.kge)?;
                let dir = cfg.out_dir.join(format!("seed_{seed}")).join("kge");
                save_kge(&model, &dir)?;
                println!(
                    "seed {seed}: final loss {:.6}, saved to {}",
                    model.loss_history.last().copied().unwrap_or(0.0),
                    dir.display()
                );
            }
        }
        Command::Run { common } => {
            if common.seed.is_empty() || common.out_dir.is_none() {
                bail!("`run` requires --seed and --out-dir");
            }
            let cfg = common.resolve()?;
            harness::run_experiment(&cfg)?;
            print_file(&cfg.out_dir.join(harness::REPORT_FILE))?;
        }
        Command::Ablate { common, variants } => {
            let cfg = common.resolve()?;
            let variants = if variants.is_empty() {
                all_variants()
            } else {
                variants.iter().map(|v| v.parse::<Variant>()).collect::<kgbridge::Result<_>>()?
            };
            harness::run_ablation(&cfg, &variants)?;
            print_file(&cfg.out_dir.join(harness::ABLATION_TABLE_FILE))?;
        }
        Command::SweepSparsity { common, ratios } => {
            let cfg = common.resolve()?;
            let ratios = if ratios.is_empty() { DEFAULT_RATIOS.to_vec() } else { ratios };
            harness::run_sparsity_sweep(&cfg, &ratios)?;
            print_file(&cfg.out_dir.join("sparsity.csv"))?;
        }
        Command::SweepLambda { common, lambdas } => {
            let cfg = common.resolve()?;
            let lambdas = if lambdas.is_empty() { DEFAULT_LAMBDAS.to_vec() } else { lambdas };
            harness::run_lambda_sweep(&cfg, &lambdas)?;
            print_file(&cfg.out_dir.join("lambda.csv"))?;
        }
        Command::Synth {
            out_dir,
            spec,
            seed,
            users,
            items,
            strength,
        } => {
            let mut s: SyntheticSpec = match spec {
                Some(p) => kgbridge::io::read_toml(&p)?,
                None => SyntheticSpec::default(),
            };
            s.seed = seed.unwrap_or(s.seed);
            s.n_users = users.unwrap_or(s.n_users);
            s.n_items = items.unwrap_or(s.n_items);
            s.pattern_strength = strength.unwrap_or(s.pattern_strength);
            let corpus = generate_synthetic_corpus(&s, &out_dir)?;
            println!("wrote {} domains to {}", corpus.domains.len(), out_dir.display());
        }
        Command::Report { csv, baseline } => {
            print!("{}", harness::summarize_reports(&csv, &baseline)?);
        }
    }
    Ok(())
}
