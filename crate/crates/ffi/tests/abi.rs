use std::ffi::{CStr, CString};
use std::ptr;

use kgbridge::harness::{generate_synthetic_corpus, ExperimentConfig, SyntheticSpec};
use kgbridge_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(kgb_last_error()) }.to_string_lossy().into_owned()
}

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn metrics_match_closed_form() {
    let ranks = [1usize, 2, 11];
    let (mut r, mut n) = (0.0, 0.0);
    let st = unsafe { kgb_metrics(ranks.as_ptr(), ranks.len(), 10, &mut r, &mut n) };
    assert_eq!(st, KgbStatus::Ok);
    assert!((r - 2.0 / 3.0).abs() < 1e-12);
    assert!((n - (1.0 + 1.0 / 3f64.log2()) / 3.0).abs() < 1e-12);
}

#[test]
fn disentanglement_uniform_similarity_is_ln2() {
    let shared = [1.0, 0.0, 1.0, 0.0];
    let spec = [2.0, 0.0, 3.0, 0.0];
    let mut out = 0.0;
    let st = unsafe { kgb_disentanglement_loss(shared.as_ptr(), spec.as_ptr(), 2, 2, 0.2, &mut out) };
    assert_eq!(st, KgbStatus::Ok, "{}", last_error());
    assert!((out - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn errors_set_codes_and_messages() {
    let mut out = 0.0;
    let st = unsafe { kgb_disentanglement_loss(ptr::null(), ptr::null(), 2, 2, 0.2, &mut out) };
    assert_eq!(st, KgbStatus::NullPointer);
    assert!(last_error().contains("shared"));

    let zeros = [0.0; 4];
    let st = unsafe { kgb_disentanglement_loss(zeros.as_ptr(), zeros.as_ptr(), 2, 2, 0.2, &mut out) };
    assert_eq!(st, KgbStatus::Numeric);

    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/ckpt").unwrap();
    assert_eq!(unsafe { kgb_model_load(missing.as_ptr(), &mut model) }, KgbStatus::Io);
    assert!(model.is_null());
    assert!(!last_error().is_empty());
    unsafe { kgb_model_free(ptr::null_mut()) };
    assert!(!unsafe { CStr::from_ptr(kgb_version()) }.to_bytes().is_empty());
}

#[test]
fn run_then_score_through_handle() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_users: 20,
        n_items: 10,
        min_len: 5,
        max_len: 7,
        ..Default::default()
    };
    generate_synthetic_corpus(&spec, &dir.path().join("data")).unwrap();
    let mut cfg = ExperimentConfig::load(&dir.path().join("data/experiment.toml")).unwrap();
    cfg.seeds = vec![3];
    cfg.model.dim = 8;
    cfg.kge.dim = 8;
    cfg.kge.epochs = 3;
    cfg.pretrain.max_epochs = 1;
    cfg.finetune.max_epochs = 1;
    let cfg_path = dir.path().join("small.toml");
    let mut rel = cfg.clone();
    rel.out_dir = "ignored".into();
    kgbridge::io::write_toml(&cfg_path, &rel).unwrap();

    let out = dir.path().join("out");
    let st = unsafe { kgb_run_experiment(cstr(&cfg_path).as_ptr(), cstr(&out).as_ptr()) };
    assert_eq!(st, KgbStatus::Ok, "{}", last_error());
    assert!(out.join("report.csv").is_file());

    let mut model = ptr::null_mut();
    let ckpt = out.join("seed_3/finetune/best");
    assert_eq!(unsafe { kgb_model_load(cstr(&ckpt).as_ptr(), &mut model) }, KgbStatus::Ok, "{}", last_error());
    let n = unsafe { kgb_model_num_items(model) };
    assert_eq!(n, 10);
    assert_eq!(unsafe { kgb_model_dim(model) }, 8);

    let mut idx = 0usize;
    let (d, item) = (CString::new("B").unwrap(), CString::new("B_i4").unwrap());
    assert_eq!(unsafe { kgb_model_item_index(model, d.as_ptr(), item.as_ptr(), &mut idx) }, KgbStatus::Ok);
    let ctx = [1usize, idx];
    let mut scores = vec![0f32; n];
    let st = unsafe { kgb_model_score(model, ctx.as_ptr(), ctx.len(), scores.as_mut_ptr(), n) };
    assert_eq!(st, KgbStatus::Ok, "{}", last_error());
    assert!(scores.iter().all(|s| s.is_finite()));

    let st = unsafe { kgb_model_score(model, ctx.as_ptr(), ctx.len(), scores.as_mut_ptr(), n - 1) };
    assert_eq!(st, KgbStatus::BufferTooSmall);
    let bad = [n + 1];
    let st = unsafe { kgb_model_score(model, bad.as_ptr(), 1, scores.as_mut_ptr(), n) };
    assert_eq!(st, KgbStatus::Lookup);
    unsafe { kgb_model_free(model) };
}
