//! Vocabulary and training-instance construction for both training stages.
//!
//! Token ids are laid out so that code tokens come first, in ontology order:
//! the id of a code token equals its leaf index, and the candidate set
//! (every code plus `EOV`) is the contiguous id range `0..=n_codes`.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{CodeId, Ontology};
use crate::synthgen::{PatientRecord, Visit};

pub const EOV: &str = "EOV";
pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const DEFAULT_INSTRUCTION: &str = "The task is to predict the diagnosis codes for the next patient visit given the patient diagnosis history.";
pub const HISTORY_HEADER: &str = "### Patient history:";
pub const TARGET_HEADER: &str = "### Diagnosis for the next visit:";
pub const VISIT_PROMPT: &str = "The diagnosis codes for this visit are:";

pub fn code2def_question(name: &str, code: &str) -> String {
    format!("What is the definition of {name} code {code}?")
}

pub fn def2code_question(name: &str, definition: &str) -> String {
    format!("What is the {name} code with the definition {definition}?")
}

pub fn code2group_question(name: &str, level: usize, code: &str) -> String {
    if level == 1 {
        format!("What is the chapter level disease group of the {name} code {code}?")
    } else {
        format!("What is the level-{level} disease group of the {name} code {code}?")
    }
}

/// Whitespace split with a trailing `?` detached into its own word.
fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(|w| match w.strip_suffix('?') {
        Some(stem) if !stem.is_empty() => [Some(stem), Some("?")],
        _ => [Some(w), None],
    })
    .flatten()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    n_codes: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, n_codes: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        let expect = [EOV, PAD, BOS, EOS];
        for (k, s) in expect.iter().enumerate() {
            if tokens.get(n_codes + k).map(String::as_str) != Some(*s) {
                return Err(Error::Invalid(format!("vocabulary lacks `{s}` at id {}", n_codes + k)));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            n_codes,
        })
    }

    /// Codes in ontology order, then `EOV`, `<pad>`, `<bos>`, `<eos>`, then
    /// text words by first appearance across `corpora`.
    pub fn build<'a>(ontology: &Ontology, corpora: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut tokens: Vec<String> = ontology.codes().iter().map(|c| c.as_str().to_string()).collect();
        let n_codes = tokens.len();
        tokens.extend([EOV, PAD, BOS, EOS].iter().map(|s| s.to_string()));
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for text in corpora {
            for w in words(text) {
                if seen.insert(w.to_string()) {
                    tokens.push(w.to_string());
                }
            }
        }
        Vocabulary::from_tokens(tokens, n_codes)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    /// Number of entries in a candidate distribution: every code plus EOV.
    pub fn n_candidates(&self) -> usize {
        self.n_codes + 1
    }

    pub fn eov_id(&self) -> usize {
        self.n_codes
    }

    pub fn pad_id(&self) -> usize {
        self.n_codes + 1
    }

    pub fn bos_id(&self) -> usize {
        self.n_codes + 2
    }

    pub fn eos_id(&self) -> usize {
        self.n_codes + 3
    }

    pub fn is_code(&self, id: usize) -> bool {
        id < self.n_codes
    }

    pub fn code_id(&self, code: &str) -> Result<usize> {
        match self.index.get(code) {
            Some(&id) if id < self.n_codes => Ok(id),
            _ => Err(Error::UnknownCode(code.to_string())),
        }
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn surface(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        words(text)
            .map(|w| {
                self.id_of(w)
                    .ok_or_else(|| Error::Invalid(format!("word `{w}` is not in the vocabulary")))
            })
            .collect()
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.surface(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{i}\t{t}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, tok) = line.split_once('\t').ok_or_else(|| Error::Malformed {
                path: "vocab.tsv".into(),
                line: line_no + 1,
                msg: "expected `id<TAB>token`".into(),
            })?;
            if id.parse::<usize>().ok() != Some(tokens.len()) {
                return Err(Error::Malformed {
                    path: "vocab.tsv".into(),
                    line: line_no + 1,
                    msg: format!("expected id {}", tokens.len()),
                });
            }
            tokens.push(tok.to_string());
        }
        let n_codes = tokens
            .iter()
            .position(|t| t == EOV)
            .ok_or_else(|| Error::Invalid("vocabulary has no EOV".into()))?;
        Vocabulary::from_tokens(tokens, n_codes)
    }

    /// Checks that the code block matches the ontology leaf order.
    pub fn check_ontology(&self, ontology: &Ontology) -> Result<()> {
        if self.n_codes != ontology.len()
            || ontology.codes().iter().zip(&self.tokens).any(|(c, t)| c.as_str() != t)
        {
            return Err(Error::Invalid("vocabulary code block does not match ontology".into()));
        }
        Ok(())
    }
}

/// Text sources a vocabulary must cover for a given ontology and instruction.
pub fn standard_corpora(ontology: &Ontology, instruction: &str) -> Vec<String> {
    let name = ontology.name();
    let mut texts = vec![
        instruction.to_string(),
        HISTORY_HEADER.to_string(),
        TARGET_HEADER.to_string(),
        VISIT_PROMPT.to_string(),
        code2def_question(name, ""),
        def2code_question(name, ""),
    ];
    for level in 1..=ontology.depth() {
        texts.push(code2group_question(name, level, ""));
        texts.extend(ontology.groups_at(level).map(|g| g.label.clone()));
    }
    texts.extend((0..ontology.len()).map(|i| ontology.definition_at(i).to_string()));
    texts
}

pub fn build_vocabulary(ontology: &Ontology, instruction: &str) -> Result<Vocabulary> {
    let corpora = standard_corpora(ontology, instruction);
    Vocabulary::build(ontology, corpora.iter().map(String::as_str))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    MemCode2def,
    MemDef2code,
    MemCode2group,
    Diagnosis,
}

/// One contrastive term: a group containing at least one positive code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupTerm {
    pub level: usize,
    pub index: usize,
    /// Sorted leaf indices of positives inside the group.
    pub positives: Vec<usize>,
    /// Sorted leaf indices of every member of the group.
    pub members: Arc<[usize]>,
}

/// Loss supervision at one decoding position. Codes are leaf indices (equal
/// to their token ids). Negatives are implicit: every leaf not in
/// `positives`, which includes `known_prefix`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiagnosisSupervision {
    pub positives: BTreeSet<usize>,
    pub known_prefix: Vec<usize>,
    pub group_terms: Vec<GroupTerm>,
}

impl DiagnosisSupervision {
    pub fn new(ontology: &Ontology, target: &BTreeSet<usize>, known_prefix: &[usize]) -> Result<Self> {
        let positives: BTreeSet<usize> = target
            .iter()
            .copied()
            .filter(|c| !known_prefix.contains(c))
            .collect();
        let mut group_terms = Vec::new();
        for level in 0..=ontology.depth() {
            let mut by_group: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for &c in &positives {
                if c >= ontology.len() {
                    return Err(Error::UnknownCode(format!("leaf #{c}")));
                }
                by_group.entry(ontology.group_index_of(c, level)).or_default().push(c);
            }
            for (index, pos) in by_group {
                group_terms.push(GroupTerm {
                    level,
                    index,
                    positives: pos,
                    members: ontology.members_shared(level, index)?,
                });
            }
        }
        Ok(DiagnosisSupervision {
            positives,
            known_prefix: known_prefix.to_vec(),
            group_terms,
        })
    }

    /// `O^neg`: every leaf that is not a positive.
    pub fn negatives(&self, n_codes: usize) -> impl Iterator<Item = usize> + '_ {
        (0..n_codes).filter(move |c| !self.positives.contains(c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub kind: InstanceKind,
    pub input_ids: Vec<usize>,
    pub completion_ids: Vec<usize>,
    pub supervision: Option<DiagnosisSupervision>,
}

impl TrainingInstance {
    /// Input followed by completion.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut s = self.input_ids.clone();
        s.extend_from_slice(&self.completion_ids);
        s
    }
}

/// Question/answer pairs teaching code definitions and group membership.
pub fn memorization_pairs(ontology: &Ontology, vocab: &Vocabulary) -> Result<Vec<TrainingInstance>> {
    let name = ontology.name();
    let bos = vocab.bos_id();
    let eos = vocab.eos_id();
    let mut out = Vec::with_capacity(ontology.len() * (2 + ontology.depth()));
    let with_bos = |mut ids: Vec<usize>| {
        ids.insert(0, bos);
        ids
    };
    for leaf in 0..ontology.len() {
        let code = ontology.code_at(leaf).as_str();
        let definition = ontology.definition_at(leaf);

        let mut answer = vocab.tokenize(definition)?;
        answer.push(eos);
        out.push(TrainingInstance {
            kind: InstanceKind::MemCode2def,
            input_ids: with_bos(vocab.tokenize(&code2def_question(name, code))?),
            completion_ids: answer,
            supervision: None,
        });

        let target: BTreeSet<usize> = [leaf].into();
        out.push(TrainingInstance {
            kind: InstanceKind::MemDef2code,
            input_ids: with_bos(vocab.tokenize(&def2code_question(name, definition))?),
            completion_ids: vec![leaf],
            supervision: Some(DiagnosisSupervision::new(ontology, &target, &[])?),
        });

        for level in 1..=ontology.depth() {
            let label = &ontology.group(level, ontology.group_index_of(leaf, level))?.label;
            let mut answer = vocab.tokenize(label)?;
            answer.push(eos);
            out.push(TrainingInstance {
                kind: InstanceKind::MemCode2group,
                input_ids: with_bos(vocab.tokenize(&code2group_question(name, level, code))?),
                completion_ids: answer,
                supervision: None,
            });
        }
    }
    Ok(out)
}

/// Prompt phrase, the codes in the given order, then `EOV`.
pub fn verbalize_visit(visit: &Visit, order: &[CodeId], vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut given: Vec<&CodeId> = order.iter().collect();
    given.sort();
    if given.len() != visit.len() || !given.iter().copied().eq(visit.codes()) {
        return Err(Error::Invalid("order is not a permutation of the visit codes".into()));
    }
    let mut ids = vocab.tokenize(VISIT_PROMPT)?;
    for c in order {
        ids.push(vocab.code_id(c.as_str())?);
    }
    ids.push(vocab.eov_id());
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub instruction: String,
    pub n_perturb: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            instruction: DEFAULT_INSTRUCTION.to_string(),
            n_perturb: 2,
            seed: 17,
        }
    }
}

fn stream_of(patient_id: &str) -> u64 {
    // FNV-1a
    patient_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Everything up to (but excluding) the verbalized target visit.
pub fn history_input(
    visits: &[Visit],
    orders: Option<&[Vec<CodeId>]>,
    instruction: &str,
    vocab: &Vocabulary,
) -> Result<Vec<usize>> {
    let mut ids = vec![vocab.bos_id()];
    ids.extend(vocab.tokenize(instruction)?);
    ids.extend(vocab.tokenize(HISTORY_HEADER)?);
    for (t, v) in visits.iter().enumerate() {
        let canonical: Vec<CodeId>;
        let order = match orders {
            Some(o) => &o[t],
            None => {
                canonical = v.codes().cloned().collect();
                &canonical
            }
        };
        ids.extend(verbalize_visit(v, order, vocab)?);
    }
    ids.extend(vocab.tokenize(TARGET_HEADER)?);
    Ok(ids)
}

/// Model input used at prediction time: the history followed by the visit
/// prompt phrase, so the next token is the first predicted code.
pub fn prediction_input(visits: &[Visit], instruction: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut ids = history_input(visits, None, instruction, vocab)?;
    ids.extend(vocab.tokenize(VISIT_PROMPT)?);
    Ok(ids)
}

/// `(T-1) * n_perturb^2` diagnosis instances for one patient.
pub fn seq2seq_pairs(
    record: &PatientRecord,
    ontology: &Ontology,
    vocab: &Vocabulary,
    cfg: &CorpusConfig,
) -> Result<Vec<TrainingInstance>> {
    if cfg.n_perturb == 0 {
        return Err(Error::Config("n_perturb must be >= 1".into()));
    }
    let visits = &record.visits;
    if visits.len() < 2 {
        return Err(Error::Invalid(format!("patient {} has fewer than 2 visits", record.patient_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream_of(&record.patient_id));
    let mut shuffled = |v: &Visit| -> Vec<CodeId> {
        let mut codes: Vec<CodeId> = v.codes().cloned().collect();
        if cfg.n_perturb > 1 {
            codes.shuffle(&mut rng);
        }
        codes
    };

    let mut out = Vec::with_capacity((visits.len() - 1) * cfg.n_perturb * cfg.n_perturb);
    for k in 1..visits.len() {
        let history = &visits[..k];
        let target = &visits[k];
        let target_leaves: BTreeSet<usize> = target
            .codes()
            .map(|c| ontology.leaf_index(c.as_str()))
            .collect::<Result<_>>()?;
        let supervision = DiagnosisSupervision::new(ontology, &target_leaves, &[])?;

        let mut inputs = Vec::with_capacity(cfg.n_perturb);
        for _ in 0..cfg.n_perturb {
            let orders: Vec<Vec<CodeId>> = history.iter().map(&mut shuffled).collect();
            inputs.push(history_input(history, Some(&orders), &cfg.instruction, vocab)?);
        }
        let mut outputs = Vec::with_capacity(cfg.n_perturb);
        for _ in 0..cfg.n_perturb {
            let order = shuffled(target);
            outputs.push(verbalize_visit(target, &order, vocab)?);
        }
        for input in &inputs {
            for output in &outputs {
                out.push(TrainingInstance {
                    kind: InstanceKind::Diagnosis,
                    input_ids: input.clone(),
                    completion_ids: output.clone(),
                    supervision: Some(supervision.clone()),
                });
            }
        }
    }
    Ok(out)
}

/// Codes of a diagnosis completion in emission order (prompt and EOV dropped).
pub fn completion_codes(inst: &TrainingInstance, vocab: &Vocabulary) -> Vec<usize> {
    inst.completion_ids
        .iter()
        .copied()
        .filter(|&id| vocab.is_code(id))
        .collect()
}

/// Number of prompt-phrase tokens at the head of a diagnosis completion.
pub fn completion_prompt_len(inst: &TrainingInstance, vocab: &Vocabulary) -> usize {
    inst.completion_ids
        .iter()
        .take_while(|&&id| !vocab.is_code(id) && id != vocab.eov_id())
        .count()
}

/// `|V|` variants of a diagnosis instance: variant `m` moves the prompt
/// phrase and the first `m` target codes into the input and drops them from
/// the positives.
pub fn teacher_forcing_variants(
    inst: &TrainingInstance,
    ontology: &Ontology,
    vocab: &Vocabulary,
) -> Result<Vec<TrainingInstance>> {
    if inst.kind != InstanceKind::Diagnosis {
        return Err(Error::Invalid("teacher forcing applies to diagnosis instances only".into()));
    }
    let codes = completion_codes(inst, vocab);
    let prompt = completion_prompt_len(inst, vocab);
    let target: BTreeSet<usize> = codes.iter().copied().collect();
    let mut out = Vec::with_capacity(codes.len());
    for m in 0..codes.len() {
        let mut input = inst.input_ids.clone();
        input.extend_from_slice(&inst.completion_ids[..prompt + m]);
        let mut completion = codes[m..].to_vec();
        completion.push(vocab.eov_id());
        out.push(TrainingInstance {
            kind: InstanceKind::Diagnosis,
            input_ids: input,
            completion_ids: completion,
            supervision: Some(DiagnosisSupervision::new(ontology, &target, &codes[..m])?),
        });
    }
    Ok(out)
}

/// Builds every diagnosis instance for a set of patients, in patient order.
pub fn diagnosis_instances(
    records: &[PatientRecord],
    ontology: &Ontology,
    vocab: &Vocabulary,
    cfg: &CorpusConfig,
) -> Result<Vec<TrainingInstance>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(seq2seq_pairs(r, ontology, vocab, cfg)?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TermRecord {
    group: (usize, usize),
    positives: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SupervisionRecord {
    positives: Vec<String>,
    known_prefix: Vec<String>,
    group_terms: Vec<TermRecord>,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    kind: InstanceKind,
    input_ids: Vec<usize>,
    completion_ids: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    supervision: Option<SupervisionRecord>,
}

pub fn write_instances(instances: &[TrainingInstance], ontology: &Ontology) -> Result<String> {
    let name = |c: &usize| ontology.code_at(*c).as_str().to_string();
    let mut out = String::new();
    for inst in instances {
        let rec = InstanceRecord {
            kind: inst.kind,
            input_ids: inst.input_ids.clone(),
            completion_ids: inst.completion_ids.clone(),
            supervision: inst.supervision.as_ref().map(|s| SupervisionRecord {
                positives: s.positives.iter().map(name).collect(),
                known_prefix: s.known_prefix.iter().map(name).collect(),
                group_terms: s
                    .group_terms
                    .iter()
                    .map(|t| TermRecord {
                        group: (t.level, t.index),
                        positives: t.positives.iter().map(name).collect(),
                    })
                    .collect(),
            }),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_instances(
    r: impl BufRead,
    source: &str,
    ontology: &Ontology,
    vocab: &Vocabulary,
) -> Result<Vec<TrainingInstance>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Malformed {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let rec: InstanceRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if let Some(&id) = rec.input_ids.iter().chain(&rec.completion_ids).find(|&&id| id >= vocab.len()) {
            return Err(bad(format!("token id {id} outside vocabulary")));
        }
        if rec.completion_ids.is_empty() {
            return Err(bad("empty completion".into()));
        }
        let supervision = match rec.supervision {
            None => None,
            Some(s) => {
                let leaves = |v: &[String]| -> Result<Vec<usize>> {
                    v.iter().map(|c| ontology.leaf_index(c)).collect()
                };
                let known = leaves(&s.known_prefix)?;
                let mut target: BTreeSet<usize> = leaves(&s.positives)?.into_iter().collect();
                target.extend(known.iter().copied());
                let sup = DiagnosisSupervision::new(ontology, &target, &known)?;
                let terms: Vec<((usize, usize), Vec<usize>)> = s
                    .group_terms
                    .iter()
                    .map(|t| Ok((t.group, leaves(&t.positives)?)))
                    .collect::<Result<_>>()?;
                let rebuilt: Vec<((usize, usize), Vec<usize>)> = sup
                    .group_terms
                    .iter()
                    .map(|t| ((t.level, t.index), t.positives.clone()))
                    .collect();
                if terms != rebuilt {
                    return Err(bad("group terms disagree with the ontology".into()));
                }
                Some(sup)
            }
        };
        out.push(TrainingInstance {
            kind: rec.kind,
            input_ids: rec.input_ids,
            completion_ids: rec.completion_ids,
            supervision,
        });
    }
    Ok(out)
}

pub fn load_instances(path: impl AsRef<Path>, ontology: &Ontology, vocab: &Vocabulary) -> Result<Vec<TrainingInstance>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_instances(std::io::BufReader::new(file), &path.display().to_string(), ontology, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_ontology, generate_records, GenConfig};

    fn toy() -> Ontology {
        let text = "#depth=2\n\
            998.51\tInfected postoperative seroma\tInjury and Poisoning\tComplications of care\n\
            998.59\tOther postoperative infection\tInjury and Poisoning\tComplications of care\n\
            250.23\tDiabetes with hyperosmolarity\tEndocrine diseases\tType I diabetes\n\
            250.03\tDiabetes without complication\tEndocrine diseases\tType I diabetes\n\
            401.9\tEssential hypertension\tCirculatory diseases\tHypertensive disease\n";
        Ontology::parse_table(text, "toy").unwrap()
    }

    fn code(s: &str) -> CodeId {
        CodeId::new(s).unwrap()
    }

    #[test]
    fn vocabulary_layout() {
        let o = toy();
        let v = build_vocabulary(&o, DEFAULT_INSTRUCTION).unwrap();
        assert_eq!(v.n_codes(), 5);
        assert_eq!(v.eov_id(), 5);
        for (i, c) in o.codes().iter().enumerate() {
            assert_eq!(v.code_id(c.as_str()).unwrap(), i);
        }
        assert_eq!(v, build_vocabulary(&o, DEFAULT_INSTRUCTION).unwrap());
        // "postoperative" appears in two definitions
        let n = v.tokens().iter().filter(|t| *t == "postoperative").count();
        assert_eq!(n, 1);
        let back = Vocabulary::from_tsv(&v.to_tsv()).unwrap();
        assert_eq!(back, v);
        back.check_ontology(&o).unwrap();
    }

    #[test]
    fn synthetic_vocabulary_has_one_id_per_leaf() {
        let cfg = GenConfig::default();
        let o = generate_ontology(&cfg).unwrap();
        let v = build_vocabulary(&o, DEFAULT_INSTRUCTION).unwrap();
        assert_eq!(v.n_codes(), 200);
        assert_eq!(v.tokens().iter().filter(|t| *t == EOV).count(), 1);
    }

    #[test]
    fn memorization_counts_and_question_text() {
        let o = toy();
        let v = build_vocabulary(&o, DEFAULT_INSTRUCTION).unwrap();
        let pairs = memorization_pairs(&o, &v).unwrap();
        assert_eq!(pairs.len(), o.len() * (2 + o.depth()));
        let q = pairs
            .iter()
            .find(|p| {
                p.kind == InstanceKind::MemCode2group
                    && v.render(&p.input_ids).contains("chapter")
                    && p.input_ids.contains(&0)
            })
            .unwrap();
        assert_eq!(
            v.render(&q.input_ids[1..]),
            "What is the chapter level disease group of the ICD-9 code 998.51 ?"
        );
        assert_eq!(v.render(&q.completion_ids), "Injury and Poisoning <eos>");
        assert_eq!(
            q.input_ids[1..],
            v.tokenize("What is the chapter level disease group of the ICD-9 code 998.51?").unwrap()[..]
        );
        for p in pairs.iter().filter(|p| p.kind == InstanceKind::MemDef2code) {
            assert_eq!(p.completion_ids.len(), 1);
            assert!(v.is_code(p.completion_ids[0]));
            let s = p.supervision.as_ref().unwrap();
            assert_eq!(s.group_terms.len(), o.depth() + 1);
        }
    }

    #[test]
    fn verbalize() {
        let o = toy();
        let v = build_vocabulary(&o, DEFAULT_INSTRUCTION).unwrap();
        let visit = Visit::new([code("401.9")]).unwrap();
        let ids = verbalize_visit(&visit, &[code("401.9")], &v).unwrap();
        let prompt = v.tokenize(VISIT_PROMPT).unwrap();
        assert_eq!(ids[..prompt.len()], prompt[..]);
        assert_eq!(ids[prompt.len()..], [4, v.eov_id()]);

        let visit = Visit::new([code("401.9"), code("250.23")]).unwrap();
        let a = verbalize_visit(&visit, &[code("401.9"), code("250.23")], &v).unwrap();
        let b = verbalize_visit(&visit, &[code("250.23"), code("401.9")], &v).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.len(), b.len());
        assert!(verbalize_visit(&visit, &[code("401.9")], &v).is_err());
        assert!(verbalize_visit(&visit, &[code("401.9"), code("998.51")], &v).is_err());
    }

    #[test]
    fn prompt_structure_matches_template() {
        let o = toy();
        let v = build_vocabulary(&o, DEFAULT_INSTRUCTION).unwrap();
        let visits = vec![
            Visit::new([code("401.9"), code("250.23")]).unwrap(),
            Visit::new([code("998.51")]).unwrap(),
        ];
        let rendered = v.render(&prediction_input(&visits, DEFAULT_INSTRUCTION, &v).unwrap());
        assert_eq!(
            rendered,
            "<bos> The task is to predict the diagnosis codes for the next patient visit given the patient diagnosis history. \
             ### Patient history: The diagnosis codes for this visit are: 250.23 401.9 EOV \
             The diagnosis codes for this visit are: 998.51 EOV ### Diagnosis for the next visit: \
             The diagnosis codes for this visit are:"
        );
    }

    fn patient() -> PatientRecord {
        PatientRecord {
            patient_id: "p1".into(),
            visits: vec![
                Visit::new([code("401.9"), code("250.23")]).unwrap(),
                Visit::new([code("998.51"), code("250.03"), code("401.9")]).unwrap(),
                Visit::new([code("998.59"), code("250.23")]).unwrap(),
            ],
        }
    }

    #[test]
    fn seq2seq_counts() {
        let o = toy();
        let v = build_vocabulary(&o, DEFAULT_INSTRUCTION).unwrap();
        let cfg = CorpusConfig {
            n_perturb: 2,
            ..CorpusConfig::default()
        };
        let inst = seq2seq_pairs(&patient(), &o, &v, &cfg).unwrap();
        assert_eq!(inst.len(), 8);
        let cfg1 = CorpusConfig {
            n_perturb: 1,
            ..CorpusConfig::default()
        };
        let inst1 = seq2seq_pairs(&patient(), &o, &v, &cfg1).unwrap();
        assert_eq!(inst1.len(), 2);
        // canonical order sorts code strings: 250.03, 401.9, 998.51
        assert_eq!(completion_codes(&inst1[0], &v), vec![3, 4, 0]);
        assert_eq!(inst, seq2seq_pairs(&patient(), &o, &v, &cfg).unwrap());
    }

    #[test]
    fn teacher_forcing_moves_prefix_to_negatives() {
        let o = toy();
        let v = build_vocabulary(&o, DEFAULT_INSTRUCTION).unwrap();
        let inst = &seq2seq_pairs(&patient(), &o, &v, &CorpusConfig { n_perturb: 1, ..Default::default() })
            .unwrap()[0];
        let variants = teacher_forcing_variants(inst, &o, &v).unwrap();
        assert_eq!(variants.len(), 3);
        assert_eq!(variants[0].supervision, inst.supervision);
        let order = completion_codes(inst, &v);
        let full = inst.full_sequence();
        for (m, var) in variants.iter().enumerate() {
            let sup = var.supervision.as_ref().unwrap();
            assert_eq!(sup.known_prefix, order[..m]);
            assert_eq!(var.input_ids[..], full[..var.input_ids.len()]);
            assert_eq!(*var.completion_ids.last().unwrap(), v.eov_id());
            let mut all: BTreeSet<usize> = sup.positives.clone();
            all.extend(sup.known_prefix.iter().copied());
            assert_eq!(all, order.iter().copied().collect());
        }
        let a = order[0];
        let sup1 = variants[1].supervision.as_ref().unwrap();
        assert!(!sup1.positives.contains(&a));
        assert!(sup1.negatives(o.len()).any(|c| c == a));
        for t in &sup1.group_terms {
            assert!(!t.positives.contains(&a));
            if t.members.contains(&a) {
                assert!(t.members.iter().filter(|c| !t.positives.contains(c)).any(|&c| c == a));
            }
        }
        assert!(teacher_forcing_variants(&memorization_pairs(&o, &v).unwrap()[0], &o, &v).is_err());
    }

    #[test]
    fn instances_round_trip_through_jsonl() {
        let cfg = GenConfig {
            n_patients: 5,
            ..GenConfig::default()
        };
        let o = generate_ontology(&cfg).unwrap();
        let v = build_vocabulary(&o, DEFAULT_INSTRUCTION).unwrap();
        let recs = generate_records(&cfg, &o).unwrap();
        let mut inst = diagnosis_instances(&recs, &o, &v, &CorpusConfig::default()).unwrap();
        inst.extend(memorization_pairs(&o, &v).unwrap());
        let text = write_instances(&inst, &o).unwrap();
        let back = read_instances(text.as_bytes(), "mem", &o, &v).unwrap();
        assert_eq!(back, inst);
    }
}
