//! Aggregated CSV tables over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::RunResult;
use crate::error::{Error, Result};
use crate::evaluation::{aggregate_and_test, read_reports_csv, MetricReport};

pub const REPORT_FILE: &str = "report.csv";
pub const ABLATION_RUNS_FILE: &str = "ablation_runs.csv";
pub const ABLATION_TABLE_FILE: &str = "ablation.csv";

/// Runs sharing one swept value (a sparsity ratio or a λ).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub runs: Vec<RunResult>,
}

/// Mean (recall, ndcg) at `k` over runs; zero when no run reports `k`.
pub fn mean_by_key(runs: &[RunResult], k: usize) -> (f64, f64) {
    let vals: Vec<(f64, f64)> = runs.iter().filter_map(|r| r.report.per_k.get(&k).copied()).collect();
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    let n = vals.len() as f64;
    (vals.iter().map(|v| v.0).sum::<f64>() / n, vals.iter().map(|v| v.1).sum::<f64>() / n)
}

/// Rows are `task,metric,K`, one column of seed means per variant.
pub fn ablation_table_csv(task: &str, per_variant: &[(String, Vec<RunResult>)], ks: &[usize]) -> String {
    let mut out = String::from("task,metric,K");
    for (name, _) in per_variant {
        write!(out, ",{name}").expect("string write");
    }
    out.push('\n');
    for metric in ["recall", "ndcg"] {
        for &k in ks {
            write!(out, "{task},{metric},{k}").expect("string write");
            for (_, runs) in per_variant {
                let (r, n) = mean_by_key(runs, k);
                write!(out, ",{:.6}", if metric == "recall" { r } else { n }).expect("string write");
            }
            out.push('\n');
        }
    }
    out
}

/// Paired p-values of every variant against `full`.
pub fn significance_csv(full: &[RunResult], per_variant: &[(String, Vec<RunResult>)]) -> Result<String> {
    let base: Vec<MetricReport> = full.iter().map(|r| r.report.clone()).collect();
    let mut out = String::from("variant,K,recall,ndcg,full_recall,full_ndcg,recall_p,ndcg_p\n");
    for (name, runs) in per_variant.iter().filter(|(n, _)| n != "full") {
        let sys: Vec<MetricReport> = runs.iter().map(|r| r.report.clone()).collect();
        for s in aggregate_and_test(&sys, &base)? {
            writeln!(
                out,
                "{name},{},{:.6},{:.6},{:.6},{:.6},{},{}",
                s.k, s.recall_mean, s.ndcg_mean, s.baseline_recall_mean, s.baseline_ndcg_mean, s.recall_p, s.ndcg_p
            )
            .expect("string write");
        }
    }
    Ok(out)
}

/// `{column},K,recall,ndcg` with seed means per swept value.
pub fn sweep_csv(column: &str, points: &[SweepPoint], ks: &[usize]) -> String {
    let mut out = format!("{column},K,recall,ndcg\n");
    for p in points {
        for &k in ks {
            let (r, n) = mean_by_key(&p.runs, k);
            writeln!(out, "{:.6},{k},{r:.6},{n:.6}", p.value).expect("string write");
        }
    }
    out
}

/// Per-system means with p-values against `baseline`, read from a
/// `system,seed,K,recall,ndcg,n_users` file.
pub fn summarize_reports(path: &Path, baseline: &str) -> Result<String> {
    let mut by_system: BTreeMap<String, Vec<MetricReport>> = BTreeMap::new();
    for (system, report) in read_reports_csv(path)? {
        by_system.entry(system).or_default().push(report);
    }
    let base = by_system
        .get(baseline)
        .ok_or_else(|| Error::Argument(format!("baseline system `{baseline}` not found in {}", path.display())))?
        .clone();
    let mut out = String::from("system,K,recall,ndcg,recall_p,ndcg_p\n");
    for (system, reports) in &by_system {
        for s in aggregate_and_test(reports, &base)? {
            let (rp, np) = if system == baseline {
                ("-".to_string(), "-".to_string())
            } else {
                (s.recall_p.to_string(), s.ndcg_p.to_string())
            };
            writeln!(out, "{system},{},{:.6},{:.6},{rp},{np}", s.k, s.recall_mean, s.ndcg_mean).expect("string write");
        }
    }
    Ok(out)
}
