use super::*;

fn tiny(dir: &Path) -> ExperimentConfig {
    let spec = SyntheticSpec {
        n_users: 24,
        n_items: 12,
        n_clusters: 3,
        n_shared: 2,
        min_len: 5,
        max_len: 8,
        ..Default::default()
    };
    generate_synthetic_corpus(&spec, &dir.join("data")).unwrap();
    let mut cfg = ExperimentConfig::load(&dir.join("data/experiment.toml")).unwrap();
    cfg.seeds = vec![0, 1];
    cfg.model.dim = 8;
    cfg.kge.dim = 8;
    cfg.kge.epochs = 5;
    cfg.pretrain.max_epochs = 2;
    cfg.finetune.max_epochs = 2;
    cfg.out_dir = dir.join("out");
    cfg
}

#[test]
fn load_resolves_paths_against_config_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert_eq!(cfg.target, "B");
    assert!(cfg.domains["A"].interactions.starts_with(dir.path()));
    cfg.check_paths().unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(dir.path());
    let mut bad = Vec::new();
    let mut c = base.clone();
    c.target = "Z".into();
    bad.push(c);
    let mut c = base.clone();
    c.seeds = vec![1, 1];
    bad.push(c);
    let mut c = base.clone();
    c.kg_sparsity = 1.0;
    bad.push(c);
    let mut c = base.clone();
    c.kge.dim = 9;
    bad.push(c);
    let mut c = base.clone();
    c.domains.remove("A");
    bad.push(c);
    for c in bad {
        assert!(c.validate().is_err());
    }
    let mut c = base;
    c.domains.get_mut("A").unwrap().kg = dir.path().join("missing.tsv");
    assert!(c.check_paths().is_err());
}

#[test]
fn variants_parse() {
    let v: Variant = "no_kg_init+no_disen".parse().unwrap();
    assert_eq!(v.flags.len(), 2);
    assert!("full".parse::<Variant>().unwrap().flags.is_empty());
    assert!("no_such".parse::<Variant>().is_err());
    assert_eq!(all_variants().len(), 6);
}

#[test]
fn resolved_pushes_seed_everywhere() {
    let mut cfg = ExperimentConfig::desk_scale();
    cfg.ablation.insert(AblationFlag::NoDisen);
    let r = cfg.resolved(7);
    assert_eq!((r.kge.seed, r.prompt.seed, r.pretrain.seed, r.finetune.seed), (7, 7, 7, 7));
    assert!(r.finetune.has(AblationFlag::NoDisen));
    assert_eq!(r.finetune.stage, crate::training::Stage::Finetune);
}

#[test]
fn experiment_writes_reports_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let results = run_experiment(&cfg).unwrap();
    assert_eq!(results.len(), 2);
    let first = std::fs::read(cfg.out_dir.join(REPORT_FILE)).unwrap();
    for f in ["seed_0/manifest.toml", "seed_1/test_unmasked.csv", "seed_1/test_history_masked.csv"] {
        assert!(cfg.out_dir.join(f).is_file(), "{f}");
    }
    let rec = &results[0].record;
    assert_eq!(rec.n_shared_relations, 2);
    assert_eq!(rec.shared_bank_drift, 0.0);

    let mut again = cfg.clone();
    again.out_dir = dir.path().join("out2");
    run_experiment(&again).unwrap();
    assert_eq!(first, std::fs::read(again.out_dir.join(REPORT_FILE)).unwrap());
}

#[test]
fn lambda_sweep_rejects_negative_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert!(run_lambda_sweep(&cfg, &[0.1, -0.2]).is_err());
    assert!(run_sparsity_sweep(&cfg, &[1.0]).is_err());
}
