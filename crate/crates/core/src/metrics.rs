//! Ranking and classification metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `|top-k ∩ gold| / |gold|`. A list shorter than `k` is used as is.
pub fn recall_at_k<T: Ord>(ranked: &[T], gold: &BTreeSet<T>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("recall@k needs k > 0".into()));
    }
    if gold.is_empty() {
        return Err(Error::Invalid("recall@k needs a non-empty gold set".into()));
    }
    let mut seen = BTreeSet::new();
    let hits = ranked
        .iter()
        .take(k)
        .filter(|c| gold.contains(*c) && seen.insert(*c))
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Per-code F1 pooled over patients, averaged with weights proportional to
/// each code's gold support. Codes never in the gold sets are ignored.
pub fn weighted_f1<T: Ord + Clone>(predicted: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "{} predicted sets for {} gold sets",
            predicted.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    // (tp, fp, fn) per code
    let mut counts: BTreeMap<&T, (usize, usize, usize)> = BTreeMap::new();
    for (p, g) in predicted.iter().zip(gold) {
        for c in g {
            let e = counts.entry(c).or_default();
            if p.contains(c) {
                e.0 += 1;
            } else {
                e.2 += 1;
            }
        }
        for c in p.difference(g) {
            counts.entry(c).or_default().1 += 1;
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (tp, fp, fneg) in counts.values() {
        let support = tp + fneg;
        if support == 0 {
            continue;
        }
        let f1 = 2.0 * *tp as f64 / (2 * tp + fp + fneg) as f64;
        num += support as f64 * f1;
        den += support as f64;
    }
    if den == 0.0 {
        return Err(Error::Invalid("gold sets are all empty".into()));
    }
    Ok(num / den)
}

/// Probability that a random positive outscores a random negative, ties
/// counted as half. Computed from average ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block shares the mean rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// F1 of the rule `score >= threshold`.
pub fn binary_f1(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Threshold among the observed scores maximizing F1; the largest such
/// threshold on ties.
pub fn best_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Invalid("threshold search needs aligned, non-empty inputs".into()));
    }
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    let mut best = (candidates[0], -1.0);
    for t in candidates {
        let f = binary_f1(scores, labels, t);
        if f > best.1 {
            best = (t, f);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub weighted_f1: f64,
    pub auc: Option<f64>,
    pub binary_f1: Option<f64>,
    /// Decision threshold used for `binary_f1`.
    pub hf_threshold: Option<f64>,
    pub n_patients: usize,
}

impl EvalReport {
    pub fn check(&self) -> Result<()> {
        let mut values: Vec<f64> = self.recall_at.values().copied().collect();
        values.push(self.weighted_f1);
        values.extend(self.auc);
        values.extend(self.binary_f1);
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("metric outside [0,1]".into()));
        }
        let r: Vec<f64> = self.recall_at.values().copied().collect();
        if r.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid("recall@k decreases in k".into()));
        }
        Ok(())
    }

    /// `(metric, value)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self.recall_at.iter().map(|(k, v)| (format!("recall@{k}"), *v)).collect();
        out.push(("weighted_f1".into(), self.weighted_f1));
        if let Some(a) = self.auc {
            out.push(("auc".into(), a));
        }
        if let Some(f) = self.binary_f1 {
            out.push(("binary_f1".into(), f));
        }
        if let Some(t) = self.hf_threshold {
            out.push(("hf_threshold".into(), t));
        }
        out.push(("n_patients".into(), self.n_patients as f64));
        out
    }

    /// Rows in the `epoch,split,metric,value` history format, without header.
    pub fn csv_rows(&self, epoch: &str, split: &str) -> String {
        let mut s = String::new();
        for (m, v) in self.entries() {
            let _ = writeln!(s, "{epoch},{split},{m},{}", format_value(v));
        }
        s
    }

    pub fn to_text(&self, split: &str) -> String {
        let mut s = format!("[{split}]\n");
        for (m, v) in self.entries() {
            let _ = writeln!(s, "{m} = {}", format_value(v));
        }
        s
    }
}

pub const CSV_HEADER: &str = "epoch,split,metric,value";

/// Fixed-precision rendering shared by every CSV and report.
pub fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.6}")
    }
}
