//! Prediction from a trained model: greedy EOV-terminated decoding,
//! first-step ranking, and the target-group risk score.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{prediction_input, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{best_threshold, binary_f1, recall_at_k, roc_auc, weighted_f1, EvalReport};
use crate::model::ModelCheckpoint;
use crate::objectives::{argmax_masked, restrict_softmax_at, CandidateDistribution};
use crate::ontology::{CodeId, GroupId, Ontology};
use crate::synthgen::{PatientRecord, Visit};

/// Anything that yields full-vocabulary logits for the next token.
pub trait CandidateScorer {
    /// Number of candidates (codes plus EOV); they occupy ids `0..n`.
    fn n_candidates(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn next_logits(&self, ids: &[usize]) -> Result<Vec<f64>>;

    fn n_codes(&self) -> usize {
        self.n_candidates() - 1
    }

    fn next_distribution(&self, ids: &[usize]) -> Result<CandidateDistribution> {
        let logits = self.next_logits(ids)?;
        restrict_softmax_at(&logits, self.n_candidates(), ids.len().saturating_sub(1))
    }
}

impl CandidateScorer for ModelCheckpoint {
    fn n_candidates(&self) -> usize {
        self.vocab.n_candidates()
    }

    fn max_seq_len(&self) -> usize {
        self.model.config().max_seq_len
    }

    fn next_logits(&self, ids: &[usize]) -> Result<Vec<f64>> {
        self.model.forward_last(ids)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// Emitted leaf indices in order.
    pub leaves: Vec<usize>,
    pub per_step_dists: Option<Vec<CandidateDistribution>>,
    pub terminated_by_eov: bool,
}

impl PredictionSet {
    pub fn codes(&self, ontology: &Ontology) -> Vec<CodeId> {
        self.leaves.iter().map(|&l| ontology.code_at(l).clone()).collect()
    }
}

/// Greedy decoding: at each step take the most probable candidate among EOV
/// and the codes not yet emitted. Stops on EOV, after `max_steps` codes, or
/// when the sequence would exceed the scorer's length limit.
pub fn decode<S: CandidateScorer + ?Sized>(
    scorer: &S,
    input_ids: &[usize],
    max_steps: usize,
    keep_dists: bool,
) -> Result<PredictionSet> {
    if input_ids.len() > scorer.max_seq_len() {
        return Err(Error::SequenceTooLong {
            len: input_ids.len(),
            max: scorer.max_seq_len(),
        });
    }
    let eov = scorer.n_codes();
    let mut ids = input_ids.to_vec();
    let mut emitted = vec![false; eov];
    let mut leaves = Vec::new();
    let mut dists = keep_dists.then(Vec::new);
    let mut terminated_by_eov = false;
    while leaves.len() < max_steps.min(eov) {
        let dist = scorer.next_distribution(&ids)?;
        let pick = argmax_masked(dist.probs(), |i| i < eov && emitted[i]).expect("EOV is never masked");
        if let Some(d) = dists.as_mut() {
            d.push(dist);
        }
        if pick == eov {
            terminated_by_eov = true;
            break;
        }
        emitted[pick] = true;
        leaves.push(pick);
        if ids.len() == scorer.max_seq_len() {
            break;
        }
        ids.push(pick);
    }
    Ok(PredictionSet {
        leaves,
        per_step_dists: dists,
        terminated_by_eov,
    })
}

/// Top-`k` codes by first-step probability, EOV excluded, ties to the lower id.
pub fn rank_first_token<S: CandidateScorer + ?Sized>(scorer: &S, input_ids: &[usize], k: usize) -> Result<Vec<usize>> {
    let dist = scorer.next_distribution(input_ids)?;
    rank_codes(&dist, k)
}

pub fn rank_codes(dist: &CandidateDistribution, k: usize) -> Result<Vec<usize>> {
    let n = dist.n_codes();
    if k > n {
        return Err(Error::Invalid(format!("k = {k} exceeds the {n} codes")));
    }
    let p = dist.probs();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// First-step probability mass on the members of `group`.
pub fn heart_failure_score<S: CandidateScorer + ?Sized>(
    scorer: &S,
    input_ids: &[usize],
    ontology: &Ontology,
    group: &GroupId,
) -> Result<f64> {
    let members = ontology.member_indices(group.level, group.index)?;
    let dist = scorer.next_distribution(input_ids)?;
    Ok(group_mass(&dist, members))
}

pub fn group_mass(dist: &CandidateDistribution, members: &[usize]) -> f64 {
    members.iter().map(|&m| dist.code(m)).sum::<f64>().clamp(0.0, 1.0)
}

/// Prediction input for a history, dropping the oldest visits until the
/// prompt plus `reserve` generated tokens fits. Returns the ids and how
/// many visits were dropped.
pub fn fit_history(
    history: &[Visit],
    instruction: &str,
    vocab: &Vocabulary,
    max_seq_len: usize,
    reserve: usize,
) -> Result<(Vec<usize>, usize)> {
    for dropped in 0..history.len() {
        let ids = prediction_input(&history[dropped..], instruction, vocab)?;
        if ids.len() + reserve <= max_seq_len {
            return Ok((ids, dropped));
        }
    }
    let ids = prediction_input(&history[history.len().saturating_sub(1)..], instruction, vocab)?;
    Err(Error::SequenceTooLong {
        len: ids.len() + reserve,
        max: max_seq_len,
    })
}

/// One line of prediction output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub predicted: Vec<CodeId>,
    pub gold: Vec<CodeId>,
    pub hf_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub instruction: String,
    pub ks: Vec<usize>,
    pub max_steps: usize,
    /// Group whose first-step mass is the binary risk score.
    pub target_group: Option<GroupId>,
    /// Frozen decision threshold; chosen on this set when `None`.
    pub hf_threshold: Option<f64>,
    /// Cap on the generated tokens reserved when fitting long histories.
    pub reserve: usize,
}

impl EvalConfig {
    pub fn new(instruction: impl Into<String>, ks: Vec<usize>, max_steps: usize) -> Self {
        EvalConfig {
            instruction: instruction.into(),
            ks,
            max_steps,
            target_group: None,
            hf_threshold: None,
            reserve: max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub predictions: Vec<PatientPrediction>,
    /// Patients whose history had to be shortened.
    pub truncated: usize,
}

/// Predicts the last visit of each record from the ones before it.
pub fn evaluate<S: CandidateScorer + ?Sized>(
    scorer: &S,
    ontology: &Ontology,
    vocab: &Vocabulary,
    records: &[PatientRecord],
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    if records.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    if cfg.ks.is_empty() || cfg.ks.contains(&0) {
        return Err(Error::Invalid("recall cut-offs must be positive".into()));
    }
    let members: Option<BTreeSet<usize>> = match &cfg.target_group {
        Some(g) => Some(ontology.member_indices(g.level, g.index)?.iter().copied().collect()),
        None => None,
    };
    let mut ks = cfg.ks.clone();
    ks.sort_unstable();
    ks.dedup();

    let mut recall_sums = vec![0.0; ks.len()];
    let mut pred_sets = Vec::with_capacity(records.len());
    let mut gold_sets = Vec::with_capacity(records.len());
    let mut scores = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    let mut predictions = Vec::with_capacity(records.len());
    let mut truncated = 0;

    for r in records {
        if r.visits.len() < 2 {
            return Err(Error::Invalid(format!("patient {} has fewer than two visits", r.patient_id)));
        }
        let (history, target) = r.visits.split_at(r.visits.len() - 1);
        let (ids, dropped) = fit_history(history, &cfg.instruction, vocab, scorer.max_seq_len(), cfg.reserve)?;
        truncated += usize::from(dropped > 0);
        let set = decode(scorer, &ids, cfg.max_steps, true)?;
        let first = &set.per_step_dists.as_ref().expect("kept")[0];
        let gold: BTreeSet<usize> = target[0]
            .codes()
            .map(|c| ontology.leaf_index(c.as_str()))
            .collect::<Result<_>>()?;
        for (sum, &k) in recall_sums.iter_mut().zip(&ks) {
            *sum += recall_at_k(&set.leaves, &gold, k)?;
        }
        let hf = match &members {
            Some(m) => {
                let v: Vec<usize> = m.iter().copied().collect();
                labels.push(gold.iter().any(|g| m.contains(g)));
                group_mass(first, &v)
            }
            None => 0.0,
        };
        scores.push(hf);
        predictions.push(PatientPrediction {
            patient_id: r.patient_id.clone(),
            predicted: set.codes(ontology),
            gold: target[0].codes().cloned().collect(),
            hf_score: hf,
        });
        pred_sets.push(set.leaves.iter().copied().collect::<BTreeSet<usize>>());
        gold_sets.push(gold);
    }

    let n = records.len() as f64;
    let (auc, binary, threshold) = if members.is_some() && labels.iter().any(|l| *l) && labels.iter().any(|l| !*l) {
        let auc = roc_auc(&scores, &labels)?;
        let t = match cfg.hf_threshold {
            Some(t) => t,
            None => best_threshold(&scores, &labels)?.0,
        };
        (Some(auc), Some(binary_f1(&scores, &labels, t)), Some(t))
    } else {
        (None, None, cfg.hf_threshold)
    };
    let report = EvalReport {
        recall_at: ks.iter().zip(&recall_sums).map(|(k, s)| (*k, s / n)).collect(),
        weighted_f1: weighted_f1(&pred_sets, &gold_sets)?,
        auc,
        binary_f1: binary,
        hf_threshold: threshold,
        n_patients: records.len(),
    };
    Ok(EvalOutcome {
        report,
        predictions,
        truncated,
    })
}

/// Fixed-logit scorers for tests and fixtures.
pub mod fixtures {
    use super::*;

    /// Returns logits from a closure of the current sequence.
    pub struct FnScorer<F> {
        pub n_candidates: usize,
        pub vocab_size: usize,
        pub max_seq_len: usize,
        pub logits: F,
    }

    impl<F: Fn(&[usize]) -> Vec<f64>> CandidateScorer for FnScorer<F> {
        fn n_candidates(&self) -> usize {
            self.n_candidates
        }

        fn max_seq_len(&self) -> usize {
            self.max_seq_len
        }

        fn next_logits(&self, ids: &[usize]) -> Result<Vec<f64>> {
            let l = (self.logits)(ids);
            debug_assert_eq!(l.len(), self.vocab_size);
            Ok(l)
        }
    }
}
