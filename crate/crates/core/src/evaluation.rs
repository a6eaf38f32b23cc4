//! Full-ranking Recall@K / NDCG@K under leave-one-out, multi-seed
//! aggregation and paired significance tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{DatasetSplit, ItemVocabulary};
use crate::error::{Error, Result};
use crate::promptbank::PromptBank;
use crate::seqmodel::{score_context, ModelState};
use crate::tensor::Real;

pub const DEFAULT_KS: [usize; 4] = [3, 5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankingResult {
    pub user: usize,
    pub target_rank: usize,
}

/// Rank of `target` (0-based position in `scores`) among non-excluded items.
/// Ties go to the lower index.
pub fn rank_target<T: Real>(scores: &[T], target: usize, excluded: &BTreeSet<usize>) -> Result<usize> {
    if target >= scores.len() {
        return Err(Error::Argument(format!("target {target} outside {} candidates", scores.len())));
    }
    if excluded.contains(&target) {
        return Err(Error::Argument(format!("target {target} is excluded from ranking")));
    }
    Ok(rank_with(scores, target, |i| excluded.contains(&i)))
}

fn rank_with<T: Real>(scores: &[T], target: usize, excluded: impl Fn(usize) -> bool) -> usize {
    let t = scores[target];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != target && !excluded(i) && (s > t || (s == t && i < target)))
        .count();
    ahead + 1
}

/// Per-K `(recall, ndcg)` for one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub seed: u64,
    pub n_users: usize,
    pub per_k: BTreeMap<usize, (f64, f64)>,
}

impl MetricReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.per_k.get(&k).map(|m| m.0)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.per_k.get(&k).map(|m| m.1)
    }
}

pub fn compute_metrics(results: &[RankingResult], ks: &[usize], seed: u64) -> Result<MetricReport> {
    if results.is_empty() {
        return Err(Error::Argument("no ranking results to aggregate".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0) {
        return Err(Error::Argument(format!("K must be positive, got {k}")));
    }
    let n = results.len() as f64;
    let per_k = ks
        .iter()
        .map(|&k| {
            let mut hits = 0.0;
            let mut gain = 0.0;
            for r in results.iter().filter(|r| r.target_rank <= k) {
                hits += 1.0;
                gain += 1.0 / ((r.target_rank + 1) as f64).log2();
            }
            (k, (hits / n, gain / n))
        })
        .collect();
    Ok(MetricReport {
        seed,
        n_users: results.len(),
        per_k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionPolicy {
    /// Items already in the user's context are not ranked (the target always is).
    #[default]
    History,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub results: Vec<RankingResult>,
    /// Users whose context was empty.
    pub skipped: usize,
}

/// Scores every user of `split` in eval mode and ranks the phase target
/// among the items of that split's domain.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model<T: Real>(
    model: &ModelState<T>,
    shared: &PromptBank<T>,
    spec: &PromptBank<T>,
    vocab: &ItemVocabulary,
    split: &DatasetSplit,
    phase: Phase,
    policy: ExclusionPolicy,
    ks: &[usize],
    seed: u64,
) -> Result<Evaluation> {
    if vocab.len() != model.num_items() {
        return Err(Error::Shape(format!(
            "vocabulary has {} items, model scores {}",
            vocab.len(),
            model.num_items()
        )));
    }
    let domain = &split.domain;
    let in_domain: Vec<bool> = (1..=vocab.len())
        .map(|i| vocab.entry(i).is_some_and(|(d, _)| d == domain))
        .collect();

    let mut cases = Vec::with_capacity(split.train_sequences.len());
    for (u, seq) in split.train_sequences.iter().enumerate() {
        let mut context = seq.items.clone();
        let target = match phase {
            Phase::Valid => split.valid_targets.get(&seq.user),
            Phase::Test => {
                if let Some(v) = split.valid_targets.get(&seq.user) {
                    context.push(v.clone());
                }
                split.test_targets.get(&seq.user)
            }
        };
        let target = target.ok_or_else(|| Error::Lookup {
            kind: "target of user",
            ids: vec![seq.user.clone()],
        })?;
        let ctx = vocab.encode(domain, &context)?;
        let tgt = vocab.encode(domain, std::slice::from_ref(target))?[0];
        cases.push((u, ctx, tgt));
    }

    let ranked: Vec<Option<RankingResult>> = cases
        .par_iter()
        .map(|(u, ctx, tgt)| {
            if ctx.is_empty() {
                return Ok(None);
            }
            let scores = score_context(model, shared, spec, ctx)?;
            let history: BTreeSet<usize> = match policy {
                ExclusionPolicy::History => ctx.iter().map(|i| i - 1).filter(|&i| i != tgt - 1).collect(),
                ExclusionPolicy::None => BTreeSet::new(),
            };
            let rank = rank_with(&scores, tgt - 1, |i| !in_domain[i] || history.contains(&i));
            Ok(Some(RankingResult {
                user: *u,
                target_rank: rank,
            }))
        })
        .collect::<Result<_>>()?;
    let skipped = ranked.iter().filter(|r| r.is_none()).count();
    let results: Vec<RankingResult> = ranked.into_iter().flatten().collect();
    if skipped > 0 {
        log::warn!("{skipped} users of {domain} skipped: empty context");
    }
    let report = compute_metrics(&results, ks, seed)?;
    Ok(Evaluation {
        report,
        results,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PValue {
    Value(f64),
    /// Fewer than two paired runs.
    TooFewRuns,
    /// Every paired difference is identical, so the statistic is undefined.
    ZeroVariance,
}

impl PValue {
    pub fn value(self) -> Option<f64> {
        match self {
            PValue::Value(p) => Some(p),
            _ => None,
        }
    }
}

impl std::fmt::Display for PValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PValue::Value(p) => write!(f, "{p:.6}"),
            PValue::TooFewRuns => f.write_str("NA(too_few_runs)"),
            PValue::ZeroVariance => f.write_str("NA(zero_variance)"),
        }
    }
}

/// Two-sided paired t-test p-value.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PValue> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!("unpaired samples: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Ok(PValue::TooFewRuns);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(PValue::ZeroVariance);
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(PValue::Value((2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub k: usize,
    pub recall_mean: f64,
    pub ndcg_mean: f64,
    pub baseline_recall_mean: f64,
    pub baseline_ndcg_mean: f64,
    pub recall_p: PValue,
    pub ndcg_p: PValue,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-K means of `system` and `baseline` with paired p-values. Runs are
/// paired by seed.
pub fn aggregate_and_test(system: &[MetricReport], baseline: &[MetricReport]) -> Result<Vec<MetricSummary>> {
    let by_seed = |rs: &[MetricReport]| -> Result<BTreeMap<u64, MetricReport>> {
        let mut m = BTreeMap::new();
        for r in rs {
            if m.insert(r.seed, r.clone()).is_some() {
                return Err(Error::Argument(format!("seed {} reported twice", r.seed)));
            }
        }
        Ok(m)
    };
    let sys = by_seed(system)?;
    let base = by_seed(baseline)?;
    if sys.keys().ne(base.keys()) {
        return Err(Error::Argument("system and baseline runs use different seeds".into()));
    }
    let ks: BTreeSet<usize> = sys.values().flat_map(|r| r.per_k.keys().copied()).collect();
    let mut out = Vec::new();
    for k in ks {
        let col = |rs: &BTreeMap<u64, MetricReport>, f: fn(&MetricReport, usize) -> Option<f64>| -> Result<Vec<f64>> {
            rs.values()
                .map(|r| f(r, k).ok_or_else(|| Error::Argument(format!("seed {} lacks K={k}", r.seed))))
                .collect()
        };
        let (sr, sn) = (col(&sys, MetricReport::recall)?, col(&sys, MetricReport::ndcg)?);
        let (br, bn) = (col(&base, MetricReport::recall)?, col(&base, MetricReport::ndcg)?);
        out.push(MetricSummary {
            k,
            recall_mean: mean(&sr),
            ndcg_mean: mean(&sn),
            baseline_recall_mean: mean(&br),
            baseline_ndcg_mean: mean(&bn),
            recall_p: paired_t_test(&sr, &br)?,
            ndcg_p: paired_t_test(&sn, &bn)?,
        });
    }
    Ok(out)
}

pub const REPORT_HEADER: &str = "system,seed,K,recall,ndcg,n_users";

/// CSV rows for `(system, report)` pairs, header included.
pub fn reports_to_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a MetricReport)>) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for (system, r) in rows {
        for (k, (recall, ndcg)) in &r.per_k {
            writeln!(out, "{system},{},{k},{recall:.6},{ndcg:.6},{}", r.seed, r.n_users).expect("string write");
        }
    }
    out
}

pub fn write_reports_csv<'a>(path: &Path, rows: impl IntoIterator<Item = (&'a str, &'a MetricReport)>) -> Result<()> {
    crate::io::write_text(path, &reports_to_csv(rows))
}

/// Parses a report CSV back into `(system, report)` pairs in file order.
pub fn read_reports_csv(path: &Path) -> Result<Vec<(String, MetricReport)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected header `{REPORT_HEADER}`"),
            })
        }
    }
    let mut out: Vec<(String, MetricReport)> = Vec::new();
    for (i, line) in lines {
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str| f64::from_str(s).map_err(|e| bad(format!("`{s}`: {e}")));
        let int = |s: &str| u64::from_str(s).map_err(|e| bad(format!("`{s}`: {e}")));
        let (seed, k, recall, ndcg, n) = (int(f[1])?, int(f[2])? as usize, num(f[3])?, num(f[4])?, int(f[5])? as usize);
        match out.last_mut() {
            Some((s, r)) if s == f[0] && r.seed == seed => {
                r.per_k.insert(k, (recall, ndcg));
            }
            _ => out.push((
                f[0].to_string(),
                MetricReport {
                    seed,
                    n_users: n,
                    per_k: BTreeMap::from([(k, (recall, ndcg))]),
                },
            )),
        }
    }
    Ok(out)
}

/// Expected NDCG@K when the target's rank is uniform over `n_items`.
pub fn uniform_ndcg(n_items: usize, k: usize) -> f64 {
    (1..=k.min(n_items)).map(|r| 1.0 / ((r + 1) as f64).log2()).sum::<f64>() / n_items as f64
}
