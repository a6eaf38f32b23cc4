use kgbridge::harness::{
    generate_synthetic_corpus, run_ablation, run_experiment, run_lambda_sweep, run_sparsity_sweep, ExperimentConfig,
    RunRecord, SyntheticSpec, Variant,
};

fn small(dir: &std::path::Path) -> ExperimentConfig {
    let spec = SyntheticSpec { n_users: 30, n_items: 15, seed: 3, ..Default::default() };
    generate_synthetic_corpus(&spec, &dir.join("data")).unwrap();
    let mut cfg = ExperimentConfig::load(&dir.join("data/experiment.toml")).unwrap();
    cfg.seeds = vec![5, 6];
    cfg.model.dim = 8;
    cfg.kge.dim = 8;
    cfg.kge.epochs = 20;
    cfg.pretrain.max_epochs = 3;
    cfg.finetune.max_epochs = 2;
    cfg
}

fn with_out(cfg: &ExperimentConfig, out: std::path::PathBuf) -> ExperimentConfig {
    ExperimentConfig { out_dir: out, ..cfg.clone() }
}

#[test]
fn identity_variants_reproduce_the_base_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let base = run_experiment(&with_out(&cfg, dir.path().join("base"))).unwrap();
    let base_reports: Vec<_> = base.iter().map(|r| r.report.clone()).collect();

    let full: Variant = "full".parse().unwrap();
    let abl = run_ablation(&with_out(&cfg, dir.path().join("abl")), &[full]).unwrap();
    assert_eq!(abl[0].1.iter().map(|r| r.report.clone()).collect::<Vec<_>>(), base_reports);

    let sweep = run_sparsity_sweep(&with_out(&cfg, dir.path().join("sp")), &[0.0, 0.4]).unwrap();
    assert_eq!(sweep[0].runs.iter().map(|r| r.report.clone()).collect::<Vec<_>>(), base_reports);
    let rec = &sweep[1].runs[0].record;
    assert_eq!(rec.kg_triples_used, rec.kg_triples_total - (rec.kg_triples_total as f64 * 0.4).round() as usize);
    let text = std::fs::read_to_string(dir.path().join("sp/sparsity.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * cfg.ks.len());
}

#[test]
fn zero_lambda_matches_no_disen_and_reuses_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let points = run_lambda_sweep(&with_out(&cfg, dir.path().join("lam")), &[0.003, 0.0]).unwrap();
    assert_eq!(points[0].value, 0.0);
    for p in &points {
        for r in &p.runs {
            assert!(r.record.pretrain_dir.ends_with(format!("lambda/pretrain/seed_{}", r.record.seed)));
        }
    }

    let no_disen: Variant = "no_disen".parse().unwrap();
    let abl = run_ablation(&with_out(&cfg, dir.path().join("abl")), &[no_disen]).unwrap();
    let a: Vec<_> = points[0].runs.iter().map(|r| r.report.clone()).collect();
    let b: Vec<_> = abl[0].1.iter().map(|r| r.report.clone()).collect();
    assert_eq!(a, b);
}

#[test]
fn manifest_echoes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_out(&small(dir.path()), dir.path().join("out"));
    run_experiment(&cfg).unwrap();
    let rec: RunRecord = kgbridge::io::read_toml(&dir.path().join("out/seed_6/manifest.toml")).unwrap();
    assert_eq!(rec.seed, 6);
    assert_eq!(rec.config.kge.seed, 6);
    assert_eq!(rec.config.finetune.seed, 6);
    assert_eq!(rec.config.model, cfg.model);
    assert_eq!(rec.shared_bank_drift, 0.0);
}
