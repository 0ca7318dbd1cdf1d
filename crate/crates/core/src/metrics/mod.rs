//! Detection metrics with ID as the positive class, plus report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorers::{Method, ScoreRow};

fn check(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Contract(format!(
            "metrics need non-empty score lists, got {} ID and {} OOD",
            id.len(),
            ood.len()
        )));
    }
    if id.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(Error::Data("score lists contain NaN".into()));
    }
    Ok(())
}

/// Exact Mann-Whitney statistic: returns `(2U, n·m)` where `U` counts ID/OOD
/// pairs with the ID score larger, ties counting one half.
pub fn auroc_counts(id: &[f64], ood: &[f64]) -> Result<(u64, u64)> {
    check(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&v| (v, true))
        .chain(ood.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of doubled mid-ranks over the ID entries.
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j share the mid-rank (i+1+j)/2.
        let mid2 = (i + 1 + j) as u64;
        let n_id = all[i..j].iter().filter(|e| e.1).count() as u64;
        rank2_sum += mid2 * n_id;
        i = j;
    }
    let n = id.len() as u64;
    Ok((rank2_sum - n * (n + 1), n * ood.len() as u64))
}

/// Probability that a random ID score exceeds a random OOD score.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    let (u2, pairs) = auroc_counts(id, ood)?;
    Ok(u2 as f64 / (2 * pairs) as f64)
}

/// Fraction of OOD scores at or above the threshold that keeps at least
/// `tpr_target` of the ID scores.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr_target: f64) -> Result<f64> {
    check(id, ood)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::Parameter(format!("tpr_target must lie in (0, 1], got {tpr_target}")));
    }
    let tau = tpr_threshold(id, tpr_target);
    Ok(ood.iter().filter(|&&v| v >= tau).count() as f64 / ood.len() as f64)
}

/// The ⌈target·n⌉-th largest ID score.
pub fn tpr_threshold(id: &[f64], tpr_target: f64) -> f64 {
    let n = id.len();
    // guard against products like 0.95·20 landing a hair above an integer
    let k = ((tpr_target * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[k - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id_dataset: String,
    pub ood_dataset: String,
    pub method: Method,
    /// AUROC in [0, 1].
    pub auroc: f64,
    /// FPR at 95 % TPR in [0, 1].
    pub fpr95: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub id_accuracy: Option<f64>,
}

/// Pairs the ID dataset's scores with every other dataset's scores, per
/// method present in `scores`.
pub fn evaluate_scores(scores: &[ScoreRow], id_dataset: &str) -> Result<Vec<ReportRow>> {
    let mut by: BTreeMap<(&str, Method), Vec<(usize, f64)>> = BTreeMap::new();
    for r in scores {
        by.entry((r.dataset_id.as_str(), r.method))
            .or_default()
            .push((r.bag_index, r.confidence));
    }
    let values = |k: &(&str, Method)| -> Vec<f64> {
        let mut v = by[k].clone();
        v.sort_by_key(|e| e.0);
        v.into_iter().map(|e| e.1).collect()
    };
    let datasets: BTreeSet<&str> = by.keys().map(|k| k.0).collect();
    if !datasets.contains(id_dataset) {
        return Err(Error::Data(format!("no scores for ID dataset {id_dataset:?}")));
    }
    let mut rows = Vec::new();
    for &ood in datasets.iter().filter(|&&d| d != id_dataset) {
        for method in Method::ALL {
            let (ki, ko) = ((id_dataset, method), (ood, method));
            if !(by.contains_key(&ki) && by.contains_key(&ko)) {
                continue;
            }
            let (a, b) = (values(&ki), values(&ko));
            rows.push(ReportRow {
                id_dataset: id_dataset.to_string(),
                ood_dataset: ood.to_string(),
                method,
                auroc: auroc(&a, &b)?,
                fpr95: fpr_at_tpr(&a, &b, 0.95)?,
            });
        }
    }
    Ok(rows)
}

fn sorted(rows: &[ReportRow]) -> Vec<&ReportRow> {
    let mut v: Vec<&ReportRow> = rows.iter().collect();
    v.sort_by(|a, b| {
        (&a.id_dataset, &a.ood_dataset, a.method.name()).cmp(&(&b.id_dataset, &b.ood_dataset, b.method.name()))
    });
    v
}

pub fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// CSV with columns `id_dataset,ood_dataset,method,auroc_pct,fpr95_pct`,
/// rows sorted lexicographically.
pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("id_dataset,ood_dataset,method,auroc_pct,fpr95_pct\n");
    for r in sorted(rows) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.id_dataset,
            r.ood_dataset,
            r.method,
            pct(r.auroc),
            pct(r.fpr95)
        );
    }
    out
}

/// Aligned table: one line per method, an AUROC↑/FPR@95↓ column pair per
/// OOD dataset.
pub fn render_table(report: &EvalReport) -> String {
    let rows = sorted(&report.rows);
    let oods: BTreeSet<&str> = rows.iter().map(|r| r.ood_dataset.as_str()).collect();
    let methods: BTreeSet<Method> = rows.iter().map(|r| r.method).collect();
    let mut out = String::new();
    if let Some(id) = rows.first().map(|r| r.id_dataset.as_str()) {
        let _ = write!(out, "ID dataset: {id}");
        if let Some(acc) = report.id_accuracy {
            let _ = write!(out, " (accuracy {}%)", pct(acc));
        }
        out.push('\n');
    } else if let Some(acc) = report.id_accuracy {
        let _ = writeln!(out, "ID accuracy {}%", pct(acc));
    }
    let cell = 18;
    let _ = write!(out, "{:<8}", "Method");
    for o in &oods {
        let _ = write!(out, "{:>w$}", o, w = cell);
    }
    out.push('\n');
    let _ = write!(out, "{:<8}", "");
    for _ in &oods {
        let _ = write!(out, "{:>9}{:>9}", "AUROC↑", "FPR95↓");
    }
    out.push('\n');
    for m in methods {
        let _ = write!(out, "{:<8}", m.label());
        for o in &oods {
            match rows.iter().find(|r| r.method == m && r.ood_dataset == *o) {
                Some(r) => {
                    let _ = write!(out, "{:>9}{:>9}", pct(r.auroc), pct(r.fpr95));
                }
                None => {
                    let _ = write!(out, "{:>9}{:>9}", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
