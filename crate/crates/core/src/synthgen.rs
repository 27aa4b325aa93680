//! Reproducible synthetic ontologies and patient histories.
//!
//! Next-visit codes are drawn from a mixture of persistence (repeat a code
//! from the previous visit), sibling transition (another leaf of the same
//! fine-level group), and a hidden per-patient trajectory group. The weight of
//! that structured mixture is `progression_strength`; the rest is uniform
//! noise over all leaves.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{CodeId, LeafRow, Ontology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub n_leaves: usize,
    pub depth: usize,
    /// Children per group, one entry per level `1..=depth`.
    pub branching: Vec<usize>,
    pub visits_per_patient: (usize, usize),
    pub codes_per_visit: (usize, usize),
    pub progression_strength: f64,
    /// Relative weights of persistence, sibling transition and trajectory
    /// inside the structured part of the mixture.
    pub mixture: (f64, f64, f64),
    /// Fine-level group index whose occurrence defines the binary task.
    pub target_group: usize,
    /// Probability that a patient's trajectory group is `target_group`.
    pub target_rate: f64,
    pub ontology_name: String,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 1,
            n_patients: 500,
            n_leaves: 200,
            depth: 3,
            branching: vec![5, 4, 2],
            visits_per_patient: (2, 5),
            codes_per_visit: (2, 6),
            progression_strength: 0.8,
            mixture: (0.35, 0.35, 0.3),
            target_group: 0,
            target_rate: 0.2,
            ontology_name: crate::ontology::DEFAULT_ONTOLOGY_NAME.to_string(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_patients == 0 || self.n_leaves == 0 {
            return bad("n_patients and n_leaves must be > 0");
        }
        if self.depth == 0 || self.branching.len() != self.depth {
            return bad("branching must have exactly `depth` entries, depth >= 1");
        }
        if self.branching.contains(&0) {
            return bad("branching entries must be > 0");
        }
        let (vmin, vmax) = self.visits_per_patient;
        if vmin < 2 || vmin > vmax {
            return bad("visits_per_patient must satisfy 2 <= min <= max");
        }
        let (cmin, cmax) = self.codes_per_visit;
        if cmin < 1 || cmin > cmax {
            return bad("codes_per_visit must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.progression_strength) {
            return bad("progression_strength must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.target_rate) {
            return bad("target_rate must be in [0, 1]");
        }
        let (a, b, c) = self.mixture;
        if a < 0.0 || b < 0.0 || c < 0.0 || a + b + c <= 0.0 {
            return bad("mixture weights must be non-negative with a positive sum");
        }
        if self.target_group >= self.fine_group_count().min(self.n_leaves) {
            return bad("target_group must index a non-empty fine-level group");
        }
        if self.ontology_name.trim().is_empty() || self.ontology_name.contains(char::is_whitespace) {
            return bad("ontology_name must be a non-empty single word");
        }
        Ok(())
    }

    pub fn fine_group_count(&self) -> usize {
        self.branching.iter().product()
    }
}

/// One admission: an unordered, non-empty set of leaf codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CodeId>", into = "Vec<CodeId>")]
pub struct Visit(BTreeSet<CodeId>);

impl TryFrom<Vec<CodeId>> for Visit {
    type Error = Error;

    fn try_from(codes: Vec<CodeId>) -> Result<Self> {
        let n = codes.len();
        let set: BTreeSet<CodeId> = codes.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Invalid("visit has no codes".into()));
        }
        if set.len() != n {
            return Err(Error::Invalid("visit contains duplicate codes".into()));
        }
        Ok(Visit(set))
    }
}

impl From<Visit> for Vec<CodeId> {
    fn from(v: Visit) -> Self {
        v.0.into_iter().collect()
    }
}

impl Visit {
    pub fn new(codes: impl IntoIterator<Item = CodeId>) -> Result<Self> {
        Visit::try_from(codes.into_iter().collect::<Vec<_>>())
    }

    /// Codes in canonical (lexicographic) order.
    pub fn codes(&self) -> impl ExactSizeIterator<Item = &CodeId> + Clone {
        self.0.iter()
    }

    pub fn contains(&self, code: &str) -> bool {
        self.0.contains(code)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_set(&self) -> &BTreeSet<CodeId> {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn validate(&self, ontology: &Ontology) -> Result<()> {
        if self.patient_id.is_empty() {
            return Err(Error::Invalid("empty patient_id".into()));
        }
        if self.visits.len() < 2 {
            return Err(Error::Invalid(format!(
                "patient {} has {} visit(s); at least 2 are required",
                self.patient_id,
                self.visits.len()
            )));
        }
        for v in &self.visits {
            for c in v.codes() {
                ontology.leaf_index(c.as_str())?;
            }
        }
        Ok(())
    }
}

const MODIFIERS: [&str; 16] = [
    "acute", "chronic", "recurrent", "congenital", "primary", "secondary", "localized", "diffuse",
    "benign", "atypical", "severe", "mild", "transient", "progressive", "idiopathic", "hereditary",
];
const SITES: [&str; 16] = [
    "hepatic", "renal", "cardiac", "pulmonary", "gastric", "cerebral", "dermal", "ocular",
    "skeletal", "vascular", "pancreatic", "thyroid", "splenic", "muscular", "neural", "lymphatic",
];
const CONDITIONS: [&str; 16] = [
    "inflammation", "stenosis", "fibrosis", "insufficiency", "hemorrhage", "infection", "lesion",
    "obstruction", "degeneration", "dysplasia", "embolism", "edema", "necrosis", "ulcer",
    "hypertrophy", "cyst",
];
const SYSTEMS: [&str; 17] = [
    "circulatory", "respiratory", "digestive", "nervous", "endocrine", "urinary", "skin",
    "musculoskeletal", "immune", "reproductive", "sensory", "blood", "metabolic", "mental",
    "perinatal", "neoplastic", "injury",
];
const LEVEL_KINDS: [&str; 4] = ["category", "block", "subblock", "section"];

/// Table rows for a synthetic ontology; these rows are the generator's
/// ground-truth group assignment.
pub fn generate_rows(cfg: &GenConfig) -> Result<Vec<LeafRow>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Labels of every fine-level group, one path of labels per group.
    let n_fine = cfg.fine_group_count();
    let mut paths: Vec<Vec<String>> = Vec::with_capacity(n_fine);
    for fine in 0..n_fine {
        let mut idx = Vec::with_capacity(cfg.depth);
        let mut rem = fine;
        for level in (0..cfg.depth).rev() {
            idx.push(rem % cfg.branching[level]);
            rem /= cfg.branching[level];
        }
        idx.reverse();
        let chapter = idx[0];
        let system = if chapter < SYSTEMS.len() {
            SYSTEMS[chapter].to_string()
        } else {
            format!("{}{}", SYSTEMS[chapter % SYSTEMS.len()], chapter / SYSTEMS.len() + 1)
        };
        let mut path = vec![format!("Diseases of the {system} system")];
        for level in 1..cfg.depth {
            let numbering: Vec<String> = idx[1..=level].iter().map(|i| (i + 1).to_string()).collect();
            let kind = LEVEL_KINDS.get(level - 1).copied().unwrap_or("part");
            path.push(format!("{system} {kind} {}", numbering.join(".")));
        }
        paths.push(path);
    }

    let mut order: Vec<usize> = (0..n_fine).collect();
    order.shuffle(&mut rng);

    let combos = MODIFIERS.len() * SITES.len() * CONDITIONS.len();
    let mut def_ids: Vec<usize> = (0..combos.max(cfg.n_leaves)).collect();
    def_ids.shuffle(&mut rng);

    let mut per_group = vec![0usize; n_fine];
    let mut rows = Vec::with_capacity(cfg.n_leaves);
    for (leaf, &def_id) in def_ids.iter().take(cfg.n_leaves).enumerate() {
        let fine = order[leaf % n_fine];
        let within = per_group[fine];
        per_group[fine] += 1;
        let combo = def_id % combos;
        let mut definition = format!(
            "{} {} {}",
            MODIFIERS[combo % 16],
            SITES[(combo / 16) % 16],
            CONDITIONS[combo / 256]
        );
        if def_id >= combos {
            definition.push_str(&format!(" type {}", def_id / combos + 1));
        }
        rows.push(LeafRow {
            code: format!("{:03}.{}", 100 + fine, within),
            definition,
            groups: paths[fine].clone(),
        });
    }
    rows.sort_by(|a, b| {
        let key = |c: &str| {
            let (h, t) = c.split_once('.').unwrap_or((c, "0"));
            (h.parse::<usize>().unwrap_or(0), t.parse::<usize>().unwrap_or(0))
        };
        key(&a.code).cmp(&key(&b.code))
    });
    Ok(rows)
}

pub fn generate_ontology(cfg: &GenConfig) -> Result<Ontology> {
    let rows = generate_rows(cfg)?;
    Ontology::from_rows(cfg.ontology_name.clone(), cfg.depth, rows)
}

/// Fine-level group used for the binary outcome.
pub fn target_group(cfg: &GenConfig, ontology: &Ontology) -> Result<crate::ontology::GroupId> {
    let label = generate_rows(cfg)?
        .into_iter()
        .find(|r| r.code.starts_with(&format!("{:03}.", 100 + cfg.target_group)))
        .map(|r| r.groups[cfg.depth - 1].clone())
        .ok_or_else(|| Error::Config("target group is empty".into()))?;
    ontology
        .find_group(ontology.depth(), &label)
        .cloned()
        .ok_or_else(|| Error::Config(format!("target group `{label}` not in ontology")))
}

pub fn generate_records(cfg: &GenConfig, ontology: &Ontology) -> Result<Vec<PatientRecord>> {
    cfg.validate()?;
    let fine = ontology.depth();
    let n_fine = ontology.group_count(fine);
    let target_label = format!("{:03}.", 100 + cfg.target_group);
    let target_fine = ontology
        .codes()
        .iter()
        .position(|c| c.as_str().starts_with(&target_label))
        .map(|leaf| ontology.group_index_of(leaf, fine));
    let (wp, ws, wt) = cfg.mixture;
    let wsum = wp + ws + wt;

    let mut out = Vec::with_capacity(cfg.n_patients);
    for p in 0..cfg.n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(p as u64 + 1);

        let trajectory = match target_fine {
            Some(t) if rng.random_bool(cfg.target_rate) => t,
            _ => rng.random_range(0..n_fine),
        };
        let traj_members = ontology.member_indices(fine, trajectory)?;
        let n_visits = rng.random_range(cfg.visits_per_patient.0..=cfg.visits_per_patient.1);

        let mut visits: Vec<Vec<usize>> = Vec::with_capacity(n_visits);
        for t in 0..n_visits {
            let size = rng.random_range(cfg.codes_per_visit.0..=cfg.codes_per_visit.1);
            let mut chosen: Vec<usize> = Vec::with_capacity(size);
            let mut seen = HashSet::new();
            let mut attempts = 0;
            while chosen.len() < size && attempts < 50 * size {
                attempts += 1;
                let leaf = if rng.random_bool(cfg.progression_strength) {
                    match visits.last() {
                        None => traj_members[rng.random_range(0..traj_members.len())],
                        Some(prev) => {
                            let r = rng.random::<f64>() * wsum;
                            if r < wp {
                                prev[rng.random_range(0..prev.len())]
                            } else if r < wp + ws {
                                let anchor = prev[rng.random_range(0..prev.len())];
                                let g = ontology.group_index_of(anchor, fine);
                                let sib = ontology.member_indices(fine, g)?;
                                sib[rng.random_range(0..sib.len())]
                            } else {
                                traj_members[rng.random_range(0..traj_members.len())]
                            }
                        }
                    }
                } else {
                    rng.random_range(0..ontology.len())
                };
                if seen.insert(leaf) {
                    chosen.push(leaf);
                }
            }
            debug_assert!(!chosen.is_empty(), "visit {t} empty");
            visits.push(chosen);
        }

        let visits = visits
            .into_iter()
            .map(|v| Visit::new(v.into_iter().map(|l| ontology.code_at(l).clone())))
            .collect::<Result<Vec<_>>>()?;
        out.push(PatientRecord {
            patient_id: format!("P{p:05}"),
            visits,
        });
    }
    out.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(out)
}

/// Patient-level train/dev/test split.
pub fn split_by_patient(
    records: &[PatientRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>, Vec<PatientRecord>)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n = records.len();
    let parts = [a, b, c].iter().filter(|r| **r > 0.0).count();
    if n < parts {
        return Err(Error::Invalid(format!("{n} patients cannot fill {parts} splits")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&x, &y| records[x].patient_id.cmp(&records[y].patient_id));
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut n_train = (n as f64 * a).round() as usize;
    let mut n_dev = (n as f64 * b).round() as usize;
    // Every split with positive weight receives at least one patient.
    if b > 0.0 && n_dev == 0 {
        n_dev = 1;
    }
    if a > 0.0 && n_train == 0 {
        n_train = 1;
    }
    let reserve_test = usize::from(c > 0.0);
    n_train = n_train.min(n - reserve_test - n_dev.min(n));
    n_dev = n_dev.min(n - reserve_test - n_train);

    let pick = |range: std::ops::Range<usize>| {
        let mut v: Vec<PatientRecord> = idx[range].iter().map(|&i| records[i].clone()).collect();
        v.sort_by(|x, y| x.patient_id.cmp(&y.patient_id));
        v
    };
    Ok((
        pick(0..n_train),
        pick(n_train..n_train + n_dev),
        pick(n_train + n_dev..n),
    ))
}

pub fn write_records(records: &[PatientRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<records>", e))?;
    }
    Ok(())
}

pub fn save_records(records: &[PatientRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_records(records, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_records(r: impl BufRead, source: &str) -> Result<Vec<PatientRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: source.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads records and validates them against the ontology.
pub fn load_records(path: impl AsRef<Path>, ontology: &Ontology) -> Result<Vec<PatientRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let records = read_records(std::io::BufReader::new(file), &path.display().to_string())?;
    for r in &records {
        r.validate(ontology)?;
    }
    Ok(records)
}
