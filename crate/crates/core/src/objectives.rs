//! Losses over the candidate distribution (every code token plus EOV).
//!
//! Candidate ids coincide with vocabulary ids `0..=n_codes`, EOV last, so
//! candidate logits are simply the first `n_codes + 1` vocabulary logits.
//! Each loss comes in two forms: a value computed from a
//! [`CandidateDistribution`] and a `*_grad` form returning the value and its
//! gradient w.r.t. the candidate logits, which is what training uses.

use serde::{Deserialize, Serialize};

use crate::corpus::{DiagnosisSupervision, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Tensor;

/// Group sums below this are treated as underflow.
pub const MIN_GROUP_MASS: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateDistribution {
    probs: Vec<f64>,
    source_position: usize,
}

impl CandidateDistribution {
    /// `probs[i]` is the probability of code `i`; the last entry is EOV.
    pub fn new(probs: Vec<f64>, source_position: usize) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Invalid("candidate distribution needs at least one code and EOV".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Invalid(format!("invalid candidate probability {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("candidate probabilities sum to {total}")));
        }
        Ok(CandidateDistribution { probs, source_position })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_codes(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn eov_index(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn eov(&self) -> f64 {
        self.probs[self.eov_index()]
    }

    pub fn code(&self, leaf: usize) -> f64 {
        self.probs[leaf]
    }

    pub fn source_position(&self) -> usize {
        self.source_position
    }

    /// Highest-probability candidate, lowest id on ties.
    pub fn argmax(&self) -> usize {
        argmax_masked(&self.probs, |_| false).expect("non-empty")
    }
}

/// Index of the largest unmasked value, lowest index on ties.
pub(crate) fn argmax_masked(values: &[f64], masked: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if masked(i) {
            continue;
        }
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_finite(z: &[f64]) -> Result<()> {
    match z.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("logit {i} is {}", z[i]))),
        None => Ok(()),
    }
}

/// Softmax over the code and EOV logits only.
pub fn restrict_softmax(logits: &[f64], vocab: &Vocabulary) -> Result<CandidateDistribution> {
    restrict_softmax_at(logits, vocab.n_candidates(), 0)
}

/// As [`restrict_softmax`] for `n_candidates` leading logits, tagging the
/// sequence position the logits came from.
pub fn restrict_softmax_at(logits: &[f64], n_candidates: usize, position: usize) -> Result<CandidateDistribution> {
    if logits.len() < n_candidates {
        return Err(Error::Invalid(format!(
            "{} logits cannot cover {n_candidates} candidates",
            logits.len()
        )));
    }
    check_finite(logits)?;
    CandidateDistribution::new(softmax(&logits[..n_candidates]), position)
}

/// A loss value with its gradient w.r.t. the logits it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Mean token cross-entropy; row `i` of `logits` predicts `targets[i]`.
/// Callers pass only completion positions.
pub fn ce_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    Ok(ce_loss_grad(logits, targets)?.0)
}

/// Mean cross-entropy with its gradient, shaped like `logits`.
pub fn ce_loss_grad(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rows != targets.len() {
        return Err(Error::Invalid(format!(
            "{} logit rows for {} target tokens",
            logits.rows,
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Invalid("cross-entropy over zero positions".into()));
    }
    check_finite(&logits.data)?;
    let n = targets.len() as f64;
    let mut grad = Tensor::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols {
            return Err(Error::TokenOutOfRange { id: t, size: logits.cols });
        }
        let row = logits.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[t];
        for (g, v) in grad.row_mut(r).iter_mut().zip(row) {
            *g = (v - lse).exp() / n;
        }
        grad.row_mut(r)[t] -= 1.0 / n;
    }
    Ok((total / n, grad))
}

/// Sum over group terms of `-ln(sum_pos p / sum_group p)`; EOV is never part
/// of a group.
pub fn hierarchical_cl_loss(dist: &CandidateDistribution, sup: &DiagnosisSupervision) -> Result<f64> {
    let p = dist.probs();
    let mut total = 0.0;
    for term in &sup.group_terms {
        let s_group: f64 = term.members.iter().map(|&m| p[m]).sum();
        let s_pos: f64 = term.positives.iter().map(|&m| p[m]).sum();
        if s_group < MIN_GROUP_MASS || s_pos < MIN_GROUP_MASS {
            return Err(Error::Underflow(format!(
                "group (level {}, index {}) has mass {s_group:e}, positives {s_pos:e}",
                term.level, term.index
            )));
        }
        total += -(s_pos / s_group).ln();
    }
    Ok(total)
}

/// Contrastive loss and gradient from candidate logits, in log-sum-exp form
/// so that it stays finite where probabilities underflow.
pub fn hierarchical_cl_grad(z: &[f64], sup: &DiagnosisSupervision) -> Result<LossGrad> {
    check_finite(z)?;
    let mut grad = vec![0.0; z.len()];
    let mut value = 0.0;
    for term in &sup.group_terms {
        if term.positives.is_empty() {
            return Err(Error::Invalid(format!(
                "group (level {}, index {}) has no positives",
                term.level, term.index
            )));
        }
        let (lse_g, w_g) = lse_weights(z, &term.members);
        let (lse_p, w_p) = lse_weights(z, &term.positives);
        value += lse_g - lse_p;
        for (&m, w) in term.members.iter().zip(w_g) {
            grad[m] += w;
        }
        for (&m, w) in term.positives.iter().zip(w_p) {
            grad[m] -= w;
        }
    }
    Ok(LossGrad { value, grad })
}

/// Log-sum-exp of `z` over `idx` and the softmax weights of those entries.
fn lse_weights(z: &[f64], idx: &[usize]) -> (f64, Vec<f64>) {
    let mx = idx.iter().map(|&i| z[i]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = idx.iter().map(|&i| (z[i] - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    (mx + s.ln(), e.into_iter().map(|v| v / s).collect())
}

/// Hinge-style threshold loss: positives should not fall below EOV and
/// negatives (including already-emitted codes) should not rise above it.
pub fn dynamic_ce_loss(dist: &CandidateDistribution, sup: &DiagnosisSupervision) -> f64 {
    let p = dist.probs();
    let eov = dist.eov();
    let n = dist.n_codes();
    let mut total = 0.0;
    for c in 0..n {
        let x = if sup.positives.contains(&c) { eov - p[c] } else { p[c] - eov };
        if x > 0.0 {
            total += x.ln_1p();
        }
    }
    total
}

/// Threshold loss and its gradient w.r.t. candidate logits. The subgradient
/// at an exact tie is 0.
pub fn dynamic_ce_grad(z: &[f64], sup: &DiagnosisSupervision) -> Result<LossGrad> {
    check_finite(z)?;
    let p = softmax(z);
    let eov = z.len() - 1;
    let mut gp = vec![0.0; z.len()];
    let mut value = 0.0;
    for c in 0..eov {
        let pos = sup.positives.contains(&c);
        let x = if pos { p[eov] - p[c] } else { p[c] - p[eov] };
        if x > 0.0 {
            value += x.ln_1p();
            let d = 1.0 / (1.0 + x);
            let s = if pos { -1.0 } else { 1.0 };
            gp[c] += s * d;
            gp[eov] -= s * d;
        }
    }
    Ok(LossGrad {
        value,
        grad: softmax_backward(&p, &gp),
    })
}

/// Pulls a gradient w.r.t. softmax outputs back to the logits.
fn softmax_backward(p: &[f64], gp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(gp).map(|(a, b)| a * b).sum();
    p.iter().zip(gp).map(|(pi, gi)| pi * (gi - dot)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cl: f64,
    pub lambda_dce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cl: 1.0,
            lambda_dce: 1.0,
        }
    }
}

/// `lambda_cl * mean(CL) + lambda_dce * mean(DCE)` over the variants.
pub fn total_diagnosis_loss(
    variants: &[(CandidateDistribution, &DiagnosisSupervision)],
    weights: LossWeights,
) -> Result<f64> {
    if variants.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let n = variants.len() as f64;
    let mut cl = 0.0;
    let mut dce = 0.0;
    for (dist, sup) in variants {
        if weights.lambda_cl != 0.0 {
            cl += hierarchical_cl_loss(dist, sup)?;
        }
        dce += dynamic_ce_loss(dist, sup);
    }
    Ok(weights.lambda_cl * cl / n + weights.lambda_dce * dce / n)
}

/// Weighted per-variant loss and gradient w.r.t. candidate logits, before
/// averaging over the batch. Terms with zero weight are skipped.
pub fn diagnosis_loss_grad(z: &[f64], sup: &DiagnosisSupervision, weights: LossWeights) -> Result<LossGrad> {
    let mut out = LossGrad {
        value: 0.0,
        grad: vec![0.0; z.len()],
    };
    let parts = [
        (weights.lambda_cl, hierarchical_cl_grad as fn(&[f64], &DiagnosisSupervision) -> Result<LossGrad>),
        (weights.lambda_dce, dynamic_ce_grad),
    ];
    for (w, f) in parts {
        if w == 0.0 {
            continue;
        }
        let lg = f(z, sup)?;
        out.value += w * lg.value;
        for (a, b) in out.grad.iter_mut().zip(lg.grad) {
            *a += w * b;
        }
    }
    Ok(out)
}
