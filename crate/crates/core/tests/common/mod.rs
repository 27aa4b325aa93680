//! Reference implementations and fixtures shared by the integration tests.
//! The oracles recompute every quantity from the ontology directly and never
//! call into the objective code they check.

#![allow(dead_code)]

use std::collections::BTreeSet;

use dxrank_core::ontology::{LeafRow, Ontology};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random ontology with `2..=max_leaves` leaves and depth `1..=max_depth`.
pub fn random_ontology(rng: &mut ChaCha8Rng, max_leaves: usize, max_depth: usize) -> Ontology {
    let n = rng.random_range(2..=max_leaves);
    let depth = rng.random_range(1..=max_depth);
    let fan: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=4)).collect();
    let rows = (0..n)
        .map(|i| {
            let mut path = String::from("g");
            let groups = fan
                .iter()
                .map(|&f| {
                    path.push_str(&format!(".{}", rng.random_range(0..f)));
                    path.clone()
                })
                .collect();
            LeafRow {
                code: format!("C{i:03}"),
                definition: format!("definition {i}"),
                groups,
            }
        })
        .collect();
    Ontology::from_rows("TEST", depth, rows).expect("random ontology is valid")
}

/// Random target visit (non-empty) and a known prefix drawn from it that
/// leaves at least one positive.
pub fn random_target(rng: &mut ChaCha8Rng, n: usize) -> (BTreeSet<usize>, Vec<usize>) {
    let size = rng.random_range(1..=n.min(6));
    let mut target = BTreeSet::new();
    while target.len() < size {
        target.insert(rng.random_range(0..n));
    }
    let mut order: Vec<usize> = target.iter().copied().collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let m = rng.random_range(0..order.len());
    (target, order[..m].to_vec())
}

pub fn random_logits(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn softmax_ref(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Contrastive loss by enumerating every group of every level and keeping
/// those that contain a positive (target minus known prefix).
pub fn cl_oracle(ont: &Ontology, probs: &[f64], target: &BTreeSet<usize>, known: &[usize]) -> f64 {
    let pos: BTreeSet<usize> = target.iter().copied().filter(|c| !known.contains(c)).collect();
    let mut total = 0.0;
    for level in 0..=ont.depth() {
        for g in ont.groups_at(level) {
            let members = ont.member_indices(level, g.index).unwrap();
            let mut s_pos = 0.0;
            let mut s_all = 0.0;
            let mut any = false;
            for &m in members {
                s_all += probs[m];
                if pos.contains(&m) {
                    s_pos += probs[m];
                    any = true;
                }
            }
            if any {
                total -= (s_pos / s_all).ln();
            }
        }
    }
    total
}

/// Threshold loss by direct summation over every code; EOV is the last entry.
pub fn dce_oracle(probs: &[f64], target: &BTreeSet<usize>, known: &[usize]) -> f64 {
    let eov = probs[probs.len() - 1];
    let mut total = 0.0;
    for (c, &p) in probs[..probs.len() - 1].iter().enumerate() {
        let positive = target.contains(&c) && !known.contains(&c);
        let violation = if positive { eov - p } else { p - eov };
        total += (1.0 + violation.max(0.0)).ln();
    }
    total
}

/// Mean token cross-entropy computed row by row.
pub fn ce_oracle(rows: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (z, &t) in rows.iter().zip(targets) {
        total -= softmax_ref(z)[t].ln();
    }
    total / targets.len() as f64
}

/// Relative error with magnitudes below `floor` treated as `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let mut m = x.to_vec();
    m[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

/// Random decoding fixture: a scorer whose logits depend on the whole
/// sequence, then checks termination, uniqueness, ranking prefixes and
/// recall monotonicity. Returns a description of the first violation.
pub fn decode_fixture_check(seed: u64) -> Result<(), String> {
    use std::hash::{DefaultHasher, Hash, Hasher};

    use dxrank_core::inference::fixtures::FnScorer;
    use dxrank_core::inference::{decode, rank_codes, CandidateScorer};
    use dxrank_core::metrics::recall_at_k;
    use rand::SeedableRng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_codes = rng.random_range(1..=25);
    let n_candidates = n_codes + 1;
    let vocab_size = n_candidates + rng.random_range(0..5);
    let history: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..vocab_size)).collect();
    let max_seq_len = history.len() + rng.random_range(0..n_codes + 3);
    // negative bias keeps EOV from winning, exercising exhaustion
    let eov_bias = [-50.0, 0.0, 1.0][rng.random_range(0..3)];
    let coarse = rng.random_range(0..3) == 0;
    let logits = move |ids: &[usize]| {
        let mut h = DefaultHasher::new();
        (seed, ids).hash(&mut h);
        let mut r = ChaCha8Rng::seed_from_u64(h.finish());
        let mut z: Vec<f64> = (0..vocab_size)
            .map(|_| {
                let v: f64 = r.random_range(-3.0..3.0);
                if coarse { v.round() } else { v }
            })
            .collect();
        z[n_codes] += eov_bias;
        z
    };
    let scorer = FnScorer {
        n_candidates,
        vocab_size,
        max_seq_len,
        logits,
    };
    let max_steps = rng.random_range(1..=n_codes + 2);
    let out = decode(&scorer, &history, max_steps, true).map_err(|e| e.to_string())?;
    let steps = out.per_step_dists.as_ref().map_or(0, |d| d.len());
    if steps > n_codes + 1 {
        return Err(format!("{steps} steps for {n_codes} codes"));
    }
    if out.leaves.len() > max_steps.min(n_codes) {
        return Err(format!("{} codes emitted, limit {}", out.leaves.len(), max_steps.min(n_codes)));
    }
    let uniq: BTreeSet<usize> = out.leaves.iter().copied().collect();
    if uniq.len() != out.leaves.len() {
        return Err(format!("duplicate emission in {:?}", out.leaves));
    }
    if out.leaves.iter().any(|&l| l >= n_codes) {
        return Err(format!("non-code emitted in {:?}", out.leaves));
    }
    if !out.terminated_by_eov
        && out.leaves.len() < max_steps.min(n_codes)
        && history.len() + out.leaves.len() < max_seq_len
    {
        return Err("stopped without a reason".into());
    }

    let dist = scorer.next_distribution(&history).map_err(|e| e.to_string())?;
    let full = rank_codes(&dist, n_codes).map_err(|e| e.to_string())?;
    let gold: BTreeSet<usize> = (0..n_codes).filter(|_| rng.random_range(0..3) == 0).chain([0]).collect();
    let mut last = 0.0;
    for k in 1..=n_codes {
        let top = rank_codes(&dist, k).map_err(|e| e.to_string())?;
        if top[..] != full[..k] {
            return Err(format!("top-{k} is not a prefix of the full ranking"));
        }
        let r = recall_at_k(&full, &gold, k).map_err(|e| e.to_string())?;
        if r + 1e-15 < last {
            return Err(format!("recall fell from {last} to {r} at k = {k}"));
        }
        last = r;
    }
    Ok(())
}

/// Visit code-sets read back from token ids: codes between a visit prompt and
/// the following EOV.
pub fn visits_in(ids: &[usize], vocab: &dxrank_core::corpus::Vocabulary) -> Vec<BTreeSet<usize>> {
    let mut out = Vec::new();
    let mut cur = BTreeSet::new();
    for &id in ids {
        if vocab.is_code(id) {
            cur.insert(id);
        } else if id == vocab.eov_id() {
            out.push(std::mem::take(&mut cur));
        }
    }
    out
}

/// Instance and teacher-forcing counts for a random cohort, plus the
/// order-invariance of perturbed variants.
pub fn counts_check(seed: u64) -> Result<(), String> {
    use dxrank_core::corpus::{build_vocabulary, diagnosis_instances, teacher_forcing_variants, CorpusConfig};
    use dxrank_core::synthgen::{generate_ontology, generate_records, GenConfig};
    use dxrank_core::trainer::variant_positions;
    use rand::SeedableRng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = GenConfig {
        seed,
        n_patients: rng.random_range(1..20),
        n_leaves: rng.random_range(4..40),
        visits_per_patient: (2, rng.random_range(2..7)),
        codes_per_visit: (1, rng.random_range(1..7)),
        progression_strength: rng.random_range(0.0..1.0),
        ..GenConfig::default()
    };
    let ont = generate_ontology(&gen).map_err(|e| e.to_string())?;
    let records = generate_records(&gen, &ont).map_err(|e| e.to_string())?;
    let cfg = CorpusConfig {
        n_perturb: rng.random_range(1..4),
        seed: rng.random(),
        ..CorpusConfig::default()
    };
    let vocab = build_vocabulary(&ont, &cfg.instruction).map_err(|e| e.to_string())?;
    let inst = diagnosis_instances(&records, &ont, &vocab, &cfg).map_err(|e| e.to_string())?;
    let np2 = cfg.n_perturb * cfg.n_perturb;
    let expected: usize = records.iter().map(|r| (r.visits.len() - 1) * np2).sum();
    if inst.len() != expected {
        return Err(format!("{} instances, expected {expected}", inst.len()));
    }

    let mut i = 0;
    for r in &records {
        let gold: Vec<BTreeSet<usize>> = r
            .visits
            .iter()
            .map(|v| v.codes().map(|c| vocab.code_id(c.as_str()).unwrap()).collect())
            .collect();
        for k in 1..r.visits.len() {
            for it in &inst[i..i + np2] {
                if visits_in(&it.input_ids, &vocab) != gold[..k] {
                    return Err(format!("{} k={k}: history code-sets differ", r.patient_id));
                }
                if visits_in(&it.completion_ids, &vocab) != [gold[k].clone()] {
                    return Err(format!("{} k={k}: target code-set differs", r.patient_id));
                }
                let variants = teacher_forcing_variants(it, &ont, &vocab).map_err(|e| e.to_string())?;
                let positions = variant_positions(it, &vocab);
                if variants.len() != gold[k].len() || positions.len() != gold[k].len() {
                    return Err(format!(
                        "{} k={k}: {} variants, {} positions for {} codes",
                        r.patient_id,
                        variants.len(),
                        positions.len(),
                        gold[k].len()
                    ));
                }
                let seq = it.full_sequence();
                for (m, (v, &p)) in variants.iter().zip(&positions).enumerate() {
                    // the single-pass position predicts the same token as the variant
                    if seq[..=p] != v.input_ids[..] || seq[p + 1] != v.completion_ids[0] {
                        return Err(format!("{} k={k}: variant {m} misaligned", r.patient_id));
                    }
                    let sup = v.supervision.as_ref().unwrap();
                    if sup.positives.len() + m != gold[k].len() || sup.known_prefix.len() != m {
                        return Err(format!("{} k={k}: variant {m} supervision sizes", r.patient_id));
                    }
                }
            }
            i += np2;
        }
    }
    Ok(())
}
