//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. `DXRANK_ACCEPTANCE=1,2,6` restricts the run to the listed
//! criteria.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use dxrank_core::config::PipelineConfig;
use dxrank_core::corpus::{
    build_vocabulary, diagnosis_instances, memorization_pairs, CorpusConfig, DiagnosisSupervision, Vocabulary,
    DEFAULT_INSTRUCTION,
};
use dxrank_core::inference::{evaluate, fit_history, rank_first_token, EvalConfig};
use dxrank_core::metrics::recall_at_k;
use dxrank_core::model::{ModelCheckpoint, ModelConfig, Transformer};
use dxrank_core::objectives::{dynamic_ce_loss, hierarchical_cl_loss, restrict_softmax_at};
use dxrank_core::ontology::Ontology;
use dxrank_core::synthgen::{generate_ontology, generate_records, split_by_patient, GenConfig, PatientRecord};
use dxrank_core::trainer::{
    memorization_scores, train_diagnose, train_ce_control, train_memorize, Objective, Stage, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

type Criterion = (usize, &'static str, fn() -> Outcome);
type ScalarFn<'a> = &'a dyn Fn(&[f64]) -> f64;

fn model_config(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 256,
        max_seq_len: 256,
        vocab_size,
        dropout: 0.1,
        init_seed: seed,
    }
}

fn memorize_config(seed: u64) -> TrainConfig {
    TrainConfig {
        stage: Stage::Memorize,
        epochs_max: 150,
        batch_size: 16,
        learning_rate: 1e-3,
        early_stop_patience: 1000,
        target_metric: Some(1.0),
        seed,
        ..TrainConfig::default()
    }
}

fn diagnose_config(seed: u64, objective: Objective, lambda_cl: f64, lambda_dce: f64) -> TrainConfig {
    TrainConfig {
        stage: Stage::Diagnose,
        objective,
        lambda_cl,
        lambda_dce,
        epochs_max: 10,
        batch_size: 16,
        learning_rate: 1e-3,
        early_stop_patience: 3,
        seed,
        ..TrainConfig::default()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(pass: bool, elapsed: Duration, limit: Duration) -> bool {
    pass && elapsed <= limit
}

fn loss_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut max_candidates = 0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ont = random_ontology(&mut rng, 29, 4);
        let (target, known) = random_target(&mut rng, ont.len());
        let sup = DiagnosisSupervision::new(&ont, &target, &known).unwrap();
        let n = ont.len() + 1;
        max_candidates = max_candidates.max(n);
        let z = random_logits(&mut rng, n, 5.0);
        let probs = softmax_ref(&z);
        let dist = restrict_softmax_at(&z, n, 0).unwrap();
        let cl = hierarchical_cl_loss(&dist, &sup).unwrap();
        let dce = dynamic_ce_loss(&dist, &sup);
        worst = worst
            .max((cl - cl_oracle(&ont, &probs, &target, &known)).abs())
            .max((dce - dce_oracle(&probs, &target, &known)).abs());
    }
    outcome(
        worst <= 1e-9 && max_candidates <= 30,
        format!("1000 instances, max |diff| {worst:.2e} (tol 1e-9)"),
    )
}

fn gradients() -> Outcome {
    use dxrank_core::corpus::DiagnosisSupervision as Sup;
    use dxrank_core::model::{PackedBatch, Tape, Tensor};
    use dxrank_core::objectives::{ce_loss, ce_loss_grad, diagnosis_loss_grad, dynamic_ce_grad, hierarchical_cl_grad, LossWeights};
    use rand::Rng;

    // loss layer: logits -> loss
    let mut layer_worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ont = random_ontology(&mut rng, 60, 3);
        let (target, known) = random_target(&mut rng, ont.len());
        let sup = Sup::new(&ont, &target, &known).unwrap();
        let n = ont.len() + 1;
        let z = loop {
            let z = random_logits(&mut rng, n, 2.0);
            let p = softmax_ref(&z);
            if p[..n - 1].iter().all(|q| (q - p[n - 1]).abs() > 1e-4) {
                break z;
            }
        };
        let t = [rng.random_range(0..n)];
        let cl = |x: &[f64]| hierarchical_cl_grad(x, &sup).unwrap().value;
        let dce = |x: &[f64]| dynamic_ce_grad(x, &sup).unwrap().value;
        let ce = |x: &[f64]| ce_loss(&Tensor::from_vec(1, n, x.to_vec()), &t).unwrap();
        let g = [
            hierarchical_cl_grad(&z, &sup).unwrap().grad,
            dynamic_ce_grad(&z, &sup).unwrap().grad,
            ce_loss_grad(&Tensor::from_vec(1, n, z.clone()), &t).unwrap().1.data,
        ];
        let fs: [ScalarFn; 3] = [&cl, &dce, &ce];
        for (f, g) in fs.iter().zip(&g) {
            for _ in 0..50 {
                let i = rng.random_range(0..n);
                layer_worst = layer_worst.max(rel_err(g[i], central_diff(*f, &z, i, 1e-5), 1e-4));
            }
        }
    }

    // full one-layer model: parameters -> loss
    let mut model_worst: f64 = 0.0;
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let ont = random_ontology(&mut rng, 12, 3);
        let (target, known) = random_target(&mut rng, ont.len());
        let sup = Sup::new(&ont, &target, &known).unwrap();
        let nc = ont.len() + 1;
        let vocab_size = nc + 5;
        let mut model = Transformer::new(ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            vocab_size,
            dropout: 0.0,
            init_seed: seed,
        })
        .unwrap();
        for slot in 0..model.params().len() {
            for v in model.params_mut().value_mut(slot).data.iter_mut() {
                *v *= 8.0;
            }
        }
        let len = rng.random_range(4..=10);
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab_size)).collect();
        let rows = vec![len - 1, len / 2];
        let targets: Vec<usize> = rows.iter().map(|_| rng.random_range(0..vocab_size)).collect();
        for case in 0..3 {
            let weights = match case {
                1 => LossWeights { lambda_cl: 1.0, lambda_dce: 0.0 },
                _ => LossWeights { lambda_cl: 0.0, lambda_dce: 1.0 },
            };
            let loss_on = |logits: &Tensor| -> (f64, Tensor) {
                if case == 0 {
                    return ce_loss_grad(logits, &targets).unwrap();
                }
                let mut grad = Tensor::zeros(logits.rows, logits.cols);
                let mut total = 0.0;
                for r in 0..logits.rows {
                    let lg = diagnosis_loss_grad(&logits.row(r)[..nc], &sup, weights).unwrap();
                    total += lg.value;
                    grad.row_mut(r)[..nc].copy_from_slice(&lg.grad);
                }
                (total, grad)
            };
            let loss = |m: &Transformer| {
                let all = m.forward(&ids).unwrap();
                let mut sel = Tensor::zeros(rows.len(), all.cols);
                for (r, &i) in rows.iter().enumerate() {
                    sel.row_mut(r).copy_from_slice(all.row(i));
                }
                loss_on(&sel).0
            };
            if case == 2 {
                let all = model.forward(&ids).unwrap();
                let near_tie = rows.iter().any(|&i| {
                    let d = restrict_softmax_at(all.row(i), nc, i).unwrap();
                    (0..d.n_codes()).any(|c| (d.code(c) - d.eov()).abs() <= 1e-4)
                });
                if near_tie {
                    continue;
                }
            }
            let mut tape = Tape::new();
            let out = model
                .forward_on_tape(&mut tape, &PackedBatch::single(&ids), &rows, None)
                .unwrap();
            let (value, g) = loss_on(tape.value(out));
            let root = tape.external_loss(out, value, g);
            let grads = tape.backward(root).unwrap();
            let analytic: Vec<(usize, Tensor)> = grads.params().map(|(s, t)| (s, t.clone())).collect();
            for _ in 0..50 {
                let (slot, g) = &analytic[rng.random_range(0..analytic.len())];
                let i = rng.random_range(0..g.data.len());
                let mut m = model.clone();
                m.params_mut().value_mut(*slot).data[i] += 1e-5;
                let up = loss(&m);
                m.params_mut().value_mut(*slot).data[i] -= 2e-5;
                let down = loss(&m);
                model_worst = model_worst.max(rel_err(g.data[i], (up - down) / 2e-5, 1e-4));
            }
        }
    }
    outcome(
        layer_worst <= 1e-6 && model_worst <= 1e-4,
        format!("loss layer max rel err {layer_worst:.2e} (tol 1e-6), full model {model_worst:.2e} (tol 1e-4)"),
    )
}

struct Setup {
    ont: Ontology,
    vocab: Vocabulary,
    train: Vec<PatientRecord>,
    dev: Vec<PatientRecord>,
    test: Vec<PatientRecord>,
}

fn default_setup() -> Setup {
    let gen = GenConfig::default();
    let ont = generate_ontology(&gen).unwrap();
    let records = generate_records(&gen, &ont).unwrap();
    let (train, dev, test) = split_by_patient(&records, (0.8, 0.1, 0.1), 7).unwrap();
    let vocab = build_vocabulary(&ont, DEFAULT_INSTRUCTION).unwrap();
    Setup {
        ont,
        vocab,
        train,
        dev,
        test,
    }
}

fn memorized(s: &Setup, seed: u64) -> (ModelCheckpoint, f64, f64, Duration) {
    let t = Instant::now();
    let pairs = memorization_pairs(&s.ont, &s.vocab).unwrap();
    let model = Transformer::new(model_config(s.vocab.len(), seed)).unwrap();
    let ck = ModelCheckpoint::new(model, s.vocab.clone()).unwrap();
    let out = train_memorize(&memorize_config(seed), ck, &s.ont, &pairs).unwrap();
    let scores = memorization_scores(&out.checkpoint, &pairs).unwrap();
    (out.checkpoint, scores.def2code, scores.code2def, t.elapsed())
}

fn memorization(s: &Setup, ck_out: &mut Option<ModelCheckpoint>) -> Outcome {
    let (ck, d2c, c2d, elapsed) = memorized(s, SEEDS[0]);
    *ck_out = Some(ck);
    outcome(
        within(d2c >= 0.99 && c2d >= 0.95, elapsed, Duration::from_secs(15 * 60)),
        format!(
            "{} leaves: def2code {:.2}% (min 99), code2def {:.2}% (min 95), {:.0}s (max 900)",
            s.ont.len(),
            100.0 * d2c,
            100.0 * c2d,
            elapsed.as_secs_f64()
        ),
    )
}

/// Mean recall@20 of the first-step ranking (EOV excluded). Reported for
/// information only: unlike the decoded list it always holds 20 codes.
fn first_token_recall(ck: &ModelCheckpoint, s: &Setup) -> f64 {
    let mut sum = 0.0;
    for r in &s.test {
        let (history, target) = r.visits.split_at(r.visits.len() - 1);
        let (ids, _) = fit_history(history, DEFAULT_INSTRUCTION, &s.vocab, ck.model.config().max_seq_len, 30).unwrap();
        let top = rank_first_token(ck, &ids, 20).unwrap();
        let gold: BTreeSet<usize> = target[0].codes().map(|c| s.ont.leaf_index(c.as_str()).unwrap()).collect();
        sum += recall_at_k(&top, &gold, 20).unwrap();
    }
    sum / s.test.len() as f64
}

/// Held-out recall@20 per arm and seed: full, CE, no CL, no DCE.
fn diagnosis_arms(s: &Setup, first: Option<ModelCheckpoint>) -> (Vec<[f64; 4]>, Duration, Duration) {
    let diag = diagnosis_instances(&s.train, &s.ont, &s.vocab, &CorpusConfig::default()).unwrap();
    let eval = EvalConfig::new(DEFAULT_INSTRUCTION, vec![20], 30);
    let mut first = first;
    let mut table = Vec::new();
    let mut t_main = Duration::ZERO;
    let mut t_ablation = Duration::ZERO;
    for seed in SEEDS {
        let t = Instant::now();
        let base = match first.take() {
            Some(ck) if seed == SEEDS[0] => ck,
            _ => memorized(s, seed).0,
        };
        let recall = |ck: &ModelCheckpoint| evaluate(ck, &s.ont, &s.vocab, &s.test, &eval).unwrap().report.recall_at[&20];
        let full = train_diagnose(&diagnose_config(seed, Objective::Ranked, 1.0, 1.0), base.clone(), &s.ont, &diag, &s.dev, &eval).unwrap();
        let ce = train_ce_control(&diagnose_config(seed, Objective::Ce, 1.0, 1.0), base.clone(), &s.ont, &diag, &s.dev, &eval).unwrap();
        let row_main = [recall(&full.checkpoint), recall(&ce.checkpoint)];
        t_main += t.elapsed();
        let t = Instant::now();
        let no_cl = train_diagnose(&diagnose_config(seed, Objective::Ranked, 0.0, 1.0), base.clone(), &s.ont, &diag, &s.dev, &eval).unwrap();
        let no_dce = train_diagnose(&diagnose_config(seed, Objective::Ranked, 1.0, 0.0), base, &s.ont, &diag, &s.dev, &eval).unwrap();
        table.push([row_main[0], row_main[1], recall(&no_cl.checkpoint), recall(&no_dce.checkpoint)]);
        let ranked: Vec<String> = [&full, &ce, &no_cl, &no_dce]
            .iter()
            .map(|o| format!("{:.4}", first_token_recall(&o.checkpoint, s)))
            .collect();
        t_ablation += t.elapsed();
        println!(
            "  seed {seed}: recall@20 full {:.4} ce {:.4} no-cl {:.4} no-dce {:.4}",
            table.last().unwrap()[0],
            table.last().unwrap()[1],
            table.last().unwrap()[2],
            table.last().unwrap()[3]
        );
        println!("  seed {seed}: first-token ranking recall@20 (info) full/ce/no-cl/no-dce {}", ranked.join(" "));
    }
    (table, t_main, t_ablation)
}

fn superiority(table: &[[f64; 4]], elapsed: Duration) -> Outcome {
    let gaps: Vec<f64> = table.iter().map(|r| 100.0 * (r[0] - r[1])).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let all_better = gaps.iter().all(|g| *g > 0.0);
    outcome(
        within(mean >= 10.0 && all_better, elapsed, Duration::from_secs(3600)),
        format!(
            "recall@20 gap full - ce per seed {:?} points, mean {mean:.2} (min 10, all > 0), {:.0}s (max 3600)",
            gaps.iter().map(|g| (g * 100.0).round() / 100.0).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    )
}

fn ablations(table: &[[f64; 4]]) -> Outcome {
    let mean = |i: usize| table.iter().map(|r| r[i]).sum::<f64>() / table.len() as f64;
    let (full, no_cl, no_dce) = (mean(0), mean(2), mean(3));
    outcome(
        no_cl < full && no_dce < full,
        format!("seed-mean recall@20 full {full:.4}, without CL {no_cl:.4}, without DCE {no_dce:.4}"),
    )
}

fn decoding() -> Outcome {
    for seed in 0..10_000u64 {
        if let Err(e) = decode_fixture_check(seed) {
            return outcome(false, format!("fixture {seed}: {e}"));
        }
    }
    outcome(true, "10000 fuzzed fixtures")
}

fn counts() -> Outcome {
    for seed in 0..200u64 {
        if let Err(e) = counts_check(seed) {
            return outcome(false, format!("cohort {seed}: {e}"));
        }
    }
    outcome(true, "200 random cohorts")
}

/// Small fixed-seed run from generation to metrics CSV.
fn pipeline_csv() -> String {
    let text = r#"
[gen]
n_patients = 40
n_leaves = 30
branching = [3, 2, 2]
[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_seq_len = 256
dropout = 0.1
[train]
epochs_max = 2
batch_size = 8
learning_rate = 0.001
[eval]
ks = [5, 10]
"#;
    let cfg = PipelineConfig::from_toml_str(text).unwrap();
    let ont = generate_ontology(&cfg.gen).unwrap();
    let records = generate_records(&cfg.gen, &ont).unwrap();
    let (train, dev, test) = split_by_patient(&records, cfg.data.split, cfg.data.split_seed).unwrap();
    let vocab = build_vocabulary(&ont, &cfg.data.instruction).unwrap();
    let model = Transformer::new(cfg.model_for(vocab.len()).unwrap()).unwrap();
    let ck = ModelCheckpoint::new(model, vocab.clone()).unwrap();
    let pairs = memorization_pairs(&ont, &vocab).unwrap();
    let m = train_memorize(&cfg.train_for(Stage::Memorize).unwrap(), ck, &ont, &pairs).unwrap();
    let diag = diagnosis_instances(&train, &ont, &vocab, &cfg.corpus()).unwrap();
    let eval = cfg.eval_config(None);
    let d = train_diagnose(&cfg.train_for(Stage::Diagnose).unwrap(), m.checkpoint, &ont, &diag, &dev, &eval).unwrap();
    let report = evaluate(&d.checkpoint, &ont, &vocab, &test, &eval).unwrap().report;
    let mut csv = d.history.to_csv();
    csv.push_str(&report.csv_rows("final", "test"));
    csv
}

fn determinism() -> Outcome {
    let a = pipeline_csv();
    let b = pipeline_csv();
    let same_csv = a == b;

    let s = {
        let gen = GenConfig {
            n_leaves: 50,
            ..GenConfig::default()
        };
        generate_ontology(&gen).unwrap()
    };
    let vocab = build_vocabulary(&s, DEFAULT_INSTRUCTION).unwrap();
    let ck = ModelCheckpoint::new(Transformer::new(model_config(vocab.len(), 5)).unwrap(), vocab.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = ModelCheckpoint::load(&path).unwrap();
    let ids: Vec<usize> = (0..40).map(|i| (i * 7) % vocab.len()).collect();
    let x = ck.model.forward(&ids).unwrap();
    let y = back.model.forward(&ids).unwrap();
    let bit_exact = x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits());
    outcome(
        same_csv && bit_exact,
        format!(
            "metrics CSV identical across runs: {same_csv} ({} bytes); checkpoint forward bit-exact: {bit_exact}",
            a.len()
        ),
    )
}

fn main() -> ExitCode {
    let selected: Option<BTreeSet<usize>> = std::env::var("DXRANK_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| selected.as_ref().is_none_or(|s| s.contains(&i));
    let mut failed = 0;
    let mut report = |i: usize, name: &str, t: Instant, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("{tag} {i} {name}: {} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
    };

    let runs: [Criterion; 2] = [(1, "loss oracles", loss_oracles), (2, "gradients", gradients)];
    for (i, name, f) in runs {
        if wanted(i) {
            let t = Instant::now();
            report(i, name, t, f());
        }
    }
    if wanted(3) || wanted(4) || wanted(5) {
        let s = default_setup();
        let mut first = None;
        if wanted(3) {
            let t = Instant::now();
            report(3, "memorization", t, memorization(&s, &mut first));
        }
        if wanted(4) || wanted(5) {
            let t = Instant::now();
            let (table, t_main, _) = diagnosis_arms(&s, first);
            if wanted(4) {
                report(4, "objective vs cross-entropy", t, superiority(&table, t_main));
            }
            if wanted(5) {
                report(5, "ablations", t, ablations(&table));
            }
        }
    }
    let rest: [Criterion; 3] = [
        (6, "decoding", decoding),
        (7, "dataset counts", counts),
        (8, "determinism", determinism),
    ];
    for (i, name, f) in rest {
        if wanted(i) {
            let t = Instant::now();
            report(i, name, t, f());
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
