//! C ABI over `kgbridge`.
//!
//! Every function returns a [`KgbStatus`]; on failure the message is
//! available from [`kgb_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use kgbridge::evaluation::{compute_metrics, RankingResult};
use kgbridge::harness::{run_experiment, ExperimentConfig};
use kgbridge::promptbank::{PromptBank, PromptKind};
use kgbridge::seqmodel::score_context;
use kgbridge::tensor::Matrix;
use kgbridge::training::{disentanglement_loss, load_checkpoint, Checkpoint};
use kgbridge::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KgbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    Numeric = 6,
    Lookup = 7,
    BufferTooSmall = 8,
    Panic = 99,
}

/// A loaded training checkpoint.
pub struct KgbModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> KgbStatus {
    match err {
        Error::Io { .. } => KgbStatus::Io,
        Error::Parse { .. } => KgbStatus::Parse,
        Error::Checkpoint { .. } => KgbStatus::Checkpoint,
        Error::Numeric(_) | Error::Divergence { .. } => KgbStatus::Numeric,
        Error::Lookup { .. } => KgbStatus::Lookup,
        Error::Stage { source, .. } => status_of(source),
        _ => KgbStatus::InvalidArgument,
    }
}

struct Fail(KgbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KgbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            KgbStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            KgbStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(KgbStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(KgbStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn kgb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kgb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory into `*out`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kgb_model_load(dir: *const c_char, out: *mut *mut KgbModel) -> KgbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = path_arg(dir, "dir")?;
        let ckpt = load_checkpoint(&dir)?;
        *out = Box::into_raw(Box::new(KgbModel { ckpt }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`kgb_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kgb_model_free(model: *mut KgbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of items; valid item indices are `1..=n`.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn kgb_model_num_items(model: *const KgbModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.model.num_items())
}

/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn kgb_model_dim(model: *const KgbModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.model.dim())
}

/// Index of `item` from `domain` in the model vocabulary, written to `*out`.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn kgb_model_item_index(
    model: *const KgbModel,
    domain: *const c_char,
    item: *const c_char,
    out: *mut usize,
) -> KgbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let domain = path_arg(domain, "domain")?;
        let item = path_arg(item, "item")?;
        let (domain, item) = (domain.to_string_lossy(), item.to_string_lossy());
        let idx = m.ckpt.vocab.get(&domain, &item).ok_or_else(|| {
            Fail(KgbStatus::Lookup, format!("unknown item `{item}` in domain `{domain}`"))
        })?;
        *out = idx;
        Ok(())
    })
}

/// Next-item logits for a context of item indices (oldest first).
/// `scores` must hold `kgb_model_num_items` values; slot `i` scores item `i + 1`.
///
/// # Safety
/// `context` must point to `context_len` indices and `scores` to
/// `scores_len` floats.
#[no_mangle]
pub unsafe extern "C" fn kgb_model_score(
    model: *const KgbModel,
    context: *const usize,
    context_len: usize,
    scores: *mut f32,
    scores_len: usize,
) -> KgbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ctx = slice_arg(context, context_len, "context")?;
        let n = m.ckpt.model.num_items();
        if scores.is_null() {
            return Err(null("scores"));
        }
        if scores_len < n {
            return Err(Fail(KgbStatus::BufferTooSmall, format!("scores holds {scores_len}, need {n}")));
        }
        if let Some(bad) = ctx.iter().find(|&&i| i == 0 || i > n) {
            return Err(Fail(KgbStatus::Lookup, format!("item index {bad} outside 1..={n}")));
        }
        let s = score_context(&m.ckpt.model, &m.ckpt.shared, &m.ckpt.spec, ctx)?;
        std::slice::from_raw_parts_mut(scores, n).copy_from_slice(&s);
        Ok(())
    })
}

/// Recall@k and NDCG@k from 1-based target ranks.
///
/// # Safety
/// `ranks` must point to `n` values; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn kgb_metrics(
    ranks: *const usize,
    n: usize,
    k: usize,
    recall: *mut f64,
    ndcg: *mut f64,
) -> KgbStatus {
    guard(|| {
        let ranks = slice_arg(ranks, n, "ranks")?;
        if recall.is_null() || ndcg.is_null() {
            return Err(null("output"));
        }
        let results: Vec<RankingResult> =
            ranks.iter().enumerate().map(|(user, &target_rank)| RankingResult { user, target_rank }).collect();
        let report = compute_metrics(&results, &[k], 0)?;
        let (r, g) = report.per_k[&k];
        *recall = r;
        *ndcg = g;
        Ok(())
    })
}

/// Contrastive disentanglement loss between two row-major `rows × cols` banks.
///
/// # Safety
/// Both banks must point to `rows * cols` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn kgb_disentanglement_loss(
    shared: *const f64,
    spec: *const f64,
    rows: usize,
    cols: usize,
    tau: f64,
    out: *mut f64,
) -> KgbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Fail(KgbStatus::InvalidArgument, "rows * cols overflows".into()))?;
        let bank = |p, kind, what| -> Result<PromptBank<f64>, Fail> {
            let data = slice_arg(p, len, what)?.to_vec();
            Ok(PromptBank::new(kind, Matrix::from_vec(rows, cols, data)?))
        };
        let shared = bank(shared, PromptKind::Shared, "shared")?;
        let spec = bank(spec, PromptKind::Specific, "spec")?;
        *out = disentanglement_loss(&shared, &spec, tau)?;
        Ok(())
    })
}

/// Runs the full pipeline for a config file. A non-null `out_dir`
/// replaces the configured output directory.
///
/// # Safety
/// Strings must be NUL-terminated; `out_dir` may be null.
#[no_mangle]
pub unsafe extern "C" fn kgb_run_experiment(config: *const c_char, out_dir: *const c_char) -> KgbStatus {
    guard(|| {
        let mut cfg = ExperimentConfig::load(&path_arg(config, "config")?)?;
        if !out_dir.is_null() {
            cfg.out_dir = path_arg(out_dir, "out_dir")?;
        }
        run_experiment(&cfg)?;
        Ok(())
    })
}
