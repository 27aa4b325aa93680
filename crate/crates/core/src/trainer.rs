//! Two-stage training: memorization of the ontology, then next-visit
//! diagnosis with the contrastive and threshold objectives (or plain
//! cross-entropy as a control).

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{completion_codes, completion_prompt_len, DiagnosisSupervision, InstanceKind, TrainingInstance};
use crate::error::{Error, Result};
use crate::inference::{evaluate, EvalConfig};
use crate::metrics::{format_value, CSV_HEADER};
use crate::model::{ModelCheckpoint, PackedBatch, ParameterStore, Tape, Tensor};
use crate::objectives::{argmax_masked, ce_loss_grad, diagnosis_loss_grad, LossWeights};
use crate::ontology::Ontology;
use crate::synthgen::PatientRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Memorize,
    Diagnose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Contrastive plus threshold loss over teacher-forcing variants.
    Ranked,
    /// Token cross-entropy on completions.
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub objective: Objective,
    pub epochs_max: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub lambda_cl: f64,
    pub lambda_dce: f64,
    pub n_perturb: usize,
    pub early_stop_patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Recall cut-off used as the diagnosis dev metric.
    pub dev_k: usize,
    /// Stop memorization once the dev metric reaches this value.
    pub target_metric: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Memorize,
            objective: Objective::Ranked,
            epochs_max: 50,
            batch_size: 16,
            learning_rate: 3e-4,
            optimizer: OptimizerConfig::default(),
            lambda_cl: 1.0,
            lambda_dce: 1.0,
            n_perturb: 2,
            early_stop_patience: 5,
            eval_every: 1,
            seed: 0,
            clip_norm: 0.0,
            dev_k: 20,
            target_metric: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be > 0");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("train.learning_rate must be a finite value >= 0");
        }
        if self.lambda_cl < 0.0 || self.lambda_dce < 0.0 || !self.lambda_cl.is_finite() || !self.lambda_dce.is_finite() {
            return bad("train.lambda_cl and train.lambda_dce must be finite and >= 0");
        }
        if self.n_perturb == 0 {
            return bad("train.n_perturb must be > 0");
        }
        if self.early_stop_patience == 0 || self.eval_every == 0 || self.dev_k == 0 {
            return bad("train.early_stop_patience, eval_every and dev_k must be > 0");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("train.clip_norm must be >= 0");
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return bad("train.optimizer: betas must be in [0,1) and eps > 0");
            }
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cl: self.lambda_cl,
            lambda_dce: self.lambda_dce,
        }
    }
}

struct Optimizer {
    cfg: OptimizerConfig,
    lr: f64,
    clip: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, params: &ParameterStore) -> Self {
        let zeros = || params.values().iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        Optimizer {
            cfg: cfg.optimizer,
            lr: cfg.learning_rate,
            clip: cfg.clip_norm,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn apply(&mut self, params: &mut ParameterStore) {
        self.step += 1;
        let norm = params.grad_norm();
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        let (values, grads) = params.values_and_grads_mut();
        match self.cfg {
            OptimizerConfig::Sgd => {
                for (p, g) in values.iter_mut().zip(grads.iter()) {
                    for (x, d) in p.data.iter_mut().zip(&g.data) {
                        *x -= self.lr * scale * d;
                    }
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for (((p, g), m), v) in values.iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
                    for (((x, d), mi), vi) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                        let d = d * scale;
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        *x -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grad();
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Target {
    Token(usize),
    Candidates(DiagnosisSupervision, LossWeights),
}

/// A training sequence with losses attached to positions; `units` is its
/// share of the batch denominator.
#[derive(Debug, Clone, PartialEq)]
struct Prepared {
    seq: Vec<usize>,
    targets: Vec<(usize, Target, f64)>,
    units: f64,
}

fn prepare_memorize(inst: &TrainingInstance, ontology: &Ontology, lambda_cl: f64) -> Result<Prepared> {
    let seq = inst.full_sequence();
    let n = inst.completion_ids.len();
    if n == 0 || inst.input_ids.is_empty() {
        return Err(Error::Invalid("memorization instance with empty input or completion".into()));
    }
    let start = inst.input_ids.len() - 1;
    let mut targets: Vec<(usize, Target, f64)> = inst
        .completion_ids
        .iter()
        .enumerate()
        .map(|(i, &t)| (start + i, Target::Token(t), 1.0 / n as f64))
        .collect();
    if inst.kind == InstanceKind::MemDef2code && lambda_cl > 0.0 {
        let gold = inst.completion_ids[0];
        let sup = match &inst.supervision {
            Some(s) => s.clone(),
            None => DiagnosisSupervision::new(ontology, &BTreeSet::from([gold]), &[])?,
        };
        let w = LossWeights {
            lambda_cl,
            lambda_dce: 0.0,
        };
        targets.push((start, Target::Candidates(sup, w), 1.0));
    }
    Ok(Prepared { seq, targets, units: 1.0 })
}

/// All teacher-forcing variants of a base diagnosis instance share one
/// sequence: variant `m` is scored at the position just before the `m`-th
/// target code, which under causal attention sees exactly its input.
fn prepare_ranked(
    inst: &TrainingInstance,
    ontology: &Ontology,
    vocab_eov: usize,
    weights: LossWeights,
    is_code: impl Fn(usize) -> bool,
) -> Result<Prepared> {
    let codes: Vec<usize> = inst.completion_ids.iter().copied().filter(|&t| is_code(t)).collect();
    let prompt = inst
        .completion_ids
        .iter()
        .take_while(|&&t| !is_code(t) && t != vocab_eov)
        .count();
    if codes.is_empty() {
        return Err(Error::Invalid("diagnosis instance without target codes".into()));
    }
    let target: BTreeSet<usize> = codes.iter().copied().collect();
    let base = inst.input_ids.len() + prompt;
    let mut targets = Vec::with_capacity(codes.len());
    for m in 0..codes.len() {
        let sup = DiagnosisSupervision::new(ontology, &target, &codes[..m])?;
        targets.push((base + m - 1, Target::Candidates(sup, weights), 1.0));
    }
    Ok(Prepared {
        seq: inst.full_sequence(),
        targets,
        units: codes.len() as f64,
    })
}

fn prepare_ce(inst: &TrainingInstance) -> Result<Prepared> {
    let n = inst.completion_ids.len();
    if n == 0 || inst.input_ids.is_empty() {
        return Err(Error::Invalid("instance with empty input or completion".into()));
    }
    let start = inst.input_ids.len() - 1;
    Ok(Prepared {
        seq: inst.full_sequence(),
        targets: inst
            .completion_ids
            .iter()
            .enumerate()
            .map(|(i, &t)| (start + i, Target::Token(t), 1.0 / n as f64))
            .collect(),
        units: 1.0,
    })
}

/// Forward and backward over one batch. Gradients are added to the model's
/// buffers; returns the batch loss.
fn batch_step(
    ck: &mut ModelCheckpoint,
    items: &[&Prepared],
    n_candidates: usize,
    rng: Option<&mut ChaCha8Rng>,
    backward: bool,
) -> Result<f64> {
    let mut batch = PackedBatch::new();
    let mut rows = Vec::new();
    for it in items {
        let off = batch.push(&it.seq);
        rows.extend(it.targets.iter().map(|(p, _, _)| off + p));
    }
    let total_units: f64 = items.iter().map(|i| i.units).sum();
    let mut tape = Tape::new();
    let logits_var = ck.model.forward_on_tape(&mut tape, &batch, &rows, rng)?;
    let logits = tape.value(logits_var);
    let v = logits.cols;
    let mut grad = Tensor::zeros(logits.rows, v);
    let mut loss = 0.0;
    let mut r = 0;
    for it in items {
        for (_, target, w) in &it.targets {
            let w = w / total_units;
            let row = logits.row(r);
            match target {
                Target::Token(t) => {
                    let (l, g) = ce_loss_grad(&Tensor::from_vec(1, v, row.to_vec()), &[*t])?;
                    loss += w * l;
                    for (a, b) in grad.row_mut(r).iter_mut().zip(&g.data) {
                        *a += w * b;
                    }
                }
                Target::Candidates(sup, weights) => {
                    let lg = diagnosis_loss_grad(&row[..n_candidates], sup, *weights)?;
                    loss += w * lg.value;
                    for (a, b) in grad.row_mut(r)[..n_candidates].iter_mut().zip(&lg.grad) {
                        *a += w * b;
                    }
                }
            }
            r += 1;
        }
    }
    if backward {
        let root = tape.external_loss(logits_var, loss, grad);
        let grads = tape.backward(root)?;
        ck.model.params_mut().accumulate(&grads, 1.0);
    }
    Ok(loss)
}

/// One row of the metrics history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.rows.push(HistoryRow {
            epoch,
            split: split.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn values(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.split, r.metric, format_value(r.value));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: History,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub epochs_run: usize,
}

/// Memorization accuracies measured on the memorization pairs themselves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemorizationScores {
    /// Definition to code: the answer token is the argmax over the vocabulary.
    pub def2code: f64,
    /// Code to definition: greedy output equals the definition exactly.
    pub code2def: f64,
    pub code2group: f64,
}

impl MemorizationScores {
    pub fn dev_metric(&self) -> f64 {
        (self.def2code + self.code2def) / 2.0
    }
}

/// Greedy generation reproduces a completion exactly iff every
/// teacher-forced position has the gold token as its argmax, so one
/// forward pass per pair suffices.
pub fn memorization_scores(ck: &ModelCheckpoint, instances: &[TrainingInstance]) -> Result<MemorizationScores> {
    let mut hits = [(0usize, 0usize); 3];
    for chunk in instances.chunks(32) {
        let mut batch = PackedBatch::new();
        let mut rows = Vec::new();
        for inst in chunk {
            let off = batch.push(&inst.full_sequence());
            let start = off + inst.input_ids.len() - 1;
            rows.extend(start..start + inst.completion_ids.len());
        }
        let mut tape = Tape::new();
        let out = ck.model.forward_on_tape(&mut tape, &batch, &rows, None)?;
        let logits = tape.value(out);
        let mut r = 0;
        for inst in chunk {
            let ok = inst
                .completion_ids
                .iter()
                .enumerate()
                .all(|(i, &t)| argmax_masked(logits.row(r + i), |_| false) == Some(t));
            r += inst.completion_ids.len();
            let slot = match inst.kind {
                InstanceKind::MemDef2code => 0,
                InstanceKind::MemCode2def => 1,
                InstanceKind::MemCode2group => 2,
                InstanceKind::Diagnosis => continue,
            };
            hits[slot].0 += usize::from(ok);
            hits[slot].1 += 1;
        }
    }
    let frac = |(h, n): (usize, usize)| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(MemorizationScores {
        def2code: frac(hits[0]),
        code2def: frac(hits[1]),
        code2group: frac(hits[2]),
    })
}

/// Shared loop: shuffled mini-batches, periodic dev evaluation, early
/// stopping, best-epoch selection.
fn run_loop(
    cfg: &TrainConfig,
    mut ck: ModelCheckpoint,
    items: &[Prepared],
    mut dev_eval: impl FnMut(&ModelCheckpoint, usize, &mut History) -> Result<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_candidates = ck.vocab.n_candidates();
    let mut history = History::default();
    let mut best_metric = dev_eval(&ck, 0, &mut history)?;
    let mut best = ck.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut opt = Optimizer::new(cfg, ck.model.params());
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut epochs_run = 0;

    for epoch in 1..=cfg.epochs_max {
        if cfg.target_metric.is_some_and(|t| best_metric >= t) {
            break;
        }
        epochs_run = epoch;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(2 + epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut unit_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &items[i]).collect();
            let units: f64 = batch.iter().map(|p| p.units).sum();
            let loss = match batch_step(&mut ck, &batch, n_candidates, Some(&mut dropout_rng), true) {
                Err(Error::NonFinite(msg)) => return Err(Error::Divergence { epoch, msg }),
                r => r?,
            };
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    msg: format!("loss is {loss}"),
                });
            }
            opt.apply(ck.model.params_mut());
            if let Some(name) = ck.model.params().first_non_finite() {
                return Err(Error::Divergence {
                    epoch,
                    msg: format!("parameter `{name}` became non-finite"),
                });
            }
            loss_sum += loss * units;
            unit_sum += units;
        }
        history.push(epoch, "train", "loss", if unit_sum > 0.0 { loss_sum / unit_sum } else { 0.0 });

        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs_max {
            let metric = dev_eval(&ck, epoch, &mut history)?;
            if metric > best_metric {
                best_metric = metric;
                best = ck.clone();
                best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    history.push(best_epoch, "dev", "best_epoch", best_epoch as f64);
    best.model.params_mut().zero_grad();
    Ok(TrainOutcome {
        checkpoint: best,
        history,
        best_epoch,
        best_metric,
        epochs_run,
    })
}

/// Stage 1: cross-entropy on every memorization pair, plus the contrastive
/// loss (weight `lambda_cl`) on definition-to-code answers.
pub fn train_memorize(
    cfg: &TrainConfig,
    ck: ModelCheckpoint,
    ontology: &Ontology,
    instances: &[TrainingInstance],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ck.vocab.check_ontology(ontology)?;
    if instances.iter().any(|i| i.kind == InstanceKind::Diagnosis) {
        return Err(Error::Invalid("memorization stage given diagnosis instances".into()));
    }
    let items = instances
        .iter()
        .map(|i| prepare_memorize(i, ontology, cfg.lambda_cl))
        .collect::<Result<Vec<_>>>()?;
    let out = run_loop(cfg, ck, &items, |ck, epoch, h| {
        let s = memorization_scores(ck, instances)?;
        h.push(epoch, "dev", "def2code_acc", s.def2code);
        h.push(epoch, "dev", "code2def_em", s.code2def);
        h.push(epoch, "dev", "code2group_em", s.code2group);
        Ok(s.dev_metric())
    })?;
    Ok(mark_stage(out, STAGE_MEMORIZE))
}

pub const STAGE_MEMORIZE: &str = "memorize";
pub const STAGE_DIAGNOSE: &str = "diagnose";
pub const STAGE_CE_CONTROL: &str = "ce_control";

/// Records the stage on checkpoints that actually trained.
fn mark_stage(mut out: TrainOutcome, stage: &str) -> TrainOutcome {
    if out.epochs_run > 0 {
        out.checkpoint.stages.push(stage.to_string());
    }
    out
}

fn diagnosis_dev<'a>(
    cfg: &'a TrainConfig,
    ontology: &'a Ontology,
    dev: &'a [PatientRecord],
    eval: &'a EvalConfig,
) -> Result<impl FnMut(&ModelCheckpoint, usize, &mut History) -> Result<f64> + 'a> {
    if dev.is_empty() {
        return Err(Error::Invalid("dev set is empty".into()));
    }
    let mut eval = eval.clone();
    if !eval.ks.contains(&cfg.dev_k) {
        eval.ks.push(cfg.dev_k);
    }
    Ok(move |ck: &ModelCheckpoint, epoch: usize, h: &mut History| {
        let out = evaluate(ck, ontology, &ck.vocab, dev, &eval)?;
        for (m, v) in out.report.entries() {
            h.push(epoch, "dev", &m, v);
        }
        Ok(out.report.recall_at[&cfg.dev_k])
    })
}

fn check_diagnosis(instances: &[TrainingInstance]) -> Result<()> {
    if instances.iter().any(|i| i.kind != InstanceKind::Diagnosis) {
        return Err(Error::Invalid("diagnosis stage given memorization instances".into()));
    }
    Ok(())
}

/// Stage 2: weighted contrastive plus threshold loss, averaged over every
/// teacher-forcing variant in a batch. Dev metric is recall@`dev_k`.
pub fn train_diagnose(
    cfg: &TrainConfig,
    ck: ModelCheckpoint,
    ontology: &Ontology,
    instances: &[TrainingInstance],
    dev: &[PatientRecord],
    eval: &EvalConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ck.vocab.check_ontology(ontology)?;
    check_diagnosis(instances)?;
    let vocab = ck.vocab.clone();
    let items = instances
        .iter()
        .map(|i| prepare_ranked(i, ontology, vocab.eov_id(), cfg.loss_weights(), |t| vocab.is_code(t)))
        .collect::<Result<Vec<_>>>()?;
    let dev_eval = diagnosis_dev(cfg, ontology, dev, eval)?;
    Ok(mark_stage(run_loop(cfg, ck, &items, dev_eval)?, STAGE_DIAGNOSE))
}

/// Control arm: the same pipeline with token cross-entropy on completions.
pub fn train_ce_control(
    cfg: &TrainConfig,
    ck: ModelCheckpoint,
    ontology: &Ontology,
    instances: &[TrainingInstance],
    dev: &[PatientRecord],
    eval: &EvalConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ck.vocab.check_ontology(ontology)?;
    check_diagnosis(instances)?;
    let items = instances.iter().map(prepare_ce).collect::<Result<Vec<_>>>()?;
    let dev_eval = diagnosis_dev(cfg, ontology, dev, eval)?;
    Ok(mark_stage(run_loop(cfg, ck, &items, dev_eval)?, STAGE_CE_CONTROL))
}

/// Dispatches on `cfg.objective`.
pub fn train_diagnosis_stage(
    cfg: &TrainConfig,
    ck: ModelCheckpoint,
    ontology: &Ontology,
    instances: &[TrainingInstance],
    dev: &[PatientRecord],
    eval: &EvalConfig,
) -> Result<TrainOutcome> {
    match cfg.objective {
        Objective::Ranked => train_diagnose(cfg, ck, ontology, instances, dev, eval),
        Objective::Ce => train_ce_control(cfg, ck, ontology, instances, dev, eval),
    }
}

/// Loss of the initial model on the first batch, in training order, for
/// either objective. Does not update parameters.
pub fn initial_batch_loss(cfg: &TrainConfig, ck: &ModelCheckpoint, ontology: &Ontology, instances: &[TrainingInstance]) -> Result<f64> {
    let vocab = &ck.vocab;
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    order.shuffle(&mut rng);
    let items = order
        .iter()
        .take(cfg.batch_size)
        .map(|&i| {
            let inst = &instances[i];
            match (inst.kind, cfg.objective) {
                (InstanceKind::Diagnosis, Objective::Ranked) => {
                    prepare_ranked(inst, ontology, vocab.eov_id(), cfg.loss_weights(), |t| vocab.is_code(t))
                }
                (InstanceKind::Diagnosis, Objective::Ce) => prepare_ce(inst),
                _ => prepare_memorize(inst, ontology, cfg.lambda_cl),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Prepared> = items.iter().collect();
    let mut scratch = ck.clone();
    batch_step(&mut scratch, &refs, vocab.n_candidates(), None, false)
}

/// Teacher-forcing positions of a base diagnosis instance within its full
/// sequence, one per variant.
pub fn variant_positions(inst: &TrainingInstance, vocab: &crate::corpus::Vocabulary) -> Vec<usize> {
    let base = inst.input_ids.len() + completion_prompt_len(inst, vocab);
    (0..completion_codes(inst, vocab).len()).map(|m| base + m - 1).collect()
}
