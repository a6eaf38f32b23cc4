use std::path::Path;
use std::process::{Command, Output};

fn kgbridge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgbridge")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn synth_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&kgbridge(&["synth", "--out-dir", "data", "--users", "24", "--items", "12", "--seed", "4"], d));
    assert!(d.join("data/experiment.toml").is_file());

    let small = [
        "--config", "data/experiment.toml", "--pretrain-epochs", "1", "--finetune-epochs", "1",
    ];
    let missing = kgbridge(&[&["run"], &small[..]].concat(), d);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--seed"));

    let run = |out: &str| ok(&kgbridge(&[&["run", "--seed", "1,2", "--out-dir", out], &small[..]].concat(), d));
    let first = run("out1");
    assert!(first.starts_with("system,seed,K,recall,ndcg,n_users\n"));
    assert_eq!(first.lines().count(), 1 + 2 * 4);
    assert_eq!(first, run("out2"));
    assert_eq!(std::fs::read(d.join("out1/report.csv")).unwrap(), std::fs::read(d.join("out2/report.csv")).unwrap());

    let summary = ok(&kgbridge(&["report", "out1/report.csv"], d));
    assert!(summary.starts_with("system,K,recall,ndcg,recall_p,ndcg_p"));
    assert!(!kgbridge(&["report", "out1/report.csv", "--baseline", "nope"], d).status.success());
}

#[test]
fn sweeps_and_ablation_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&kgbridge(&["synth", "--out-dir", "data", "--users", "16", "--items", "10"], d));
    let base = ["--config", "data/experiment.toml", "--seed", "0", "--pretrain-epochs", "1", "--finetune-epochs", "1"];
    let with = |extra: &[&'static str]| [extra, &base[..]].concat();

    let lambda = ok(&kgbridge(&with(&["sweep-lambda", "--lambdas", "0.005,0,0.002", "--out-dir", "lam"]), d));
    let values: Vec<&str> = lambda.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(values.first(), Some(&"0.000000"));
    assert_eq!(values.last(), Some(&"0.005000"));
    assert!(!kgbridge(&with(&["sweep-lambda", "--lambdas=-0.1", "--out-dir", "bad"]), d).status.success());

    let sparsity = ok(&kgbridge(&with(&["sweep-sparsity", "--ratios", "0,0.5", "--out-dir", "sp"]), d));
    assert_eq!(sparsity.lines().count(), 1 + 2 * 4);

    let table = ok(&kgbridge(&with(&["ablate", "--variants", "full,no_freeze", "--out-dir", "ab"]), d));
    assert!(table.starts_with("task,metric,K,full,no_freeze"));
    let manifest = std::fs::read_to_string(d.join("ab/ablation/no_freeze/seed_0/manifest.toml")).unwrap();
    let drift: f64 = manifest
        .lines()
        .find_map(|l| l.strip_prefix("shared_bank_drift = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(drift > 0.0);
    assert!(!kgbridge(&with(&["ablate", "--variants", "no_such", "--out-dir", "bad"]), d).status.success());
}
