use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use dxrank_core::config::PipelineConfig;
use dxrank_core::corpus::{build_vocabulary, diagnosis_instances, load_instances, memorization_pairs, write_instances, Vocabulary};
use dxrank_core::inference::{decode, fit_history, group_mass, evaluate, EvalConfig};
use dxrank_core::metrics::CSV_HEADER;
use dxrank_core::model::{ModelCheckpoint, Transformer};
use dxrank_core::ontology::{load_ontology, save_ontology, CodeId, Ontology};
use dxrank_core::synthgen::{
    generate_ontology, generate_records, load_records, save_records, split_by_patient, target_group, PatientRecord,
};
use dxrank_core::trainer::{train_diagnosis_stage, train_memorize, Stage, STAGE_MEMORIZE};
use dxrank_core::{Error, Result};

use crate::{Cli, Command, StageArg};

pub const ONTOLOGY: &str = "ontology.tsv";
pub const RECORDS: &str = "records.jsonl";
pub const TRAIN: &str = "train.jsonl";
pub const DEV: &str = "dev.jsonl";
pub const TEST: &str = "test.jsonl";
pub const VOCAB: &str = "vocab.tsv";
pub const MEMORIZE: &str = "memorize.jsonl";
pub const DIAGNOSE: &str = "diagnose.jsonl";

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<String>,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    tool_version: &'static str,
    timestamp: String,
    /// Fully resolved configuration.
    config: String,
}

struct Run<'a> {
    cli: &'a Cli,
    cfg: PipelineConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run<'_> {
    fn input(&mut self, dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        self.inputs.push(p.clone());
        p
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.cli.out_dir.join(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.outputs.push(p.clone());
        Ok(p)
    }

    fn finish(self, command: &str) -> Result<()> {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let show = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect();
        let m = RunManifest {
            command: command.to_string(),
            config_path: self.cli.config.as_ref().map(|p| p.display().to_string()),
            seed: self.cli.seed,
            inputs: show(&self.inputs),
            outputs: show(&self.outputs),
            tool_version: env!("CARGO_PKG_VERSION"),
            timestamp: format!("unix:{timestamp}"),
            config: self.cfg.to_toml()?,
        };
        let p = self.cli.out_dir.join(format!("manifest-{command}.json"));
        fs::write(&p, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::io(&p, e))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    let mut run = Run {
        cli,
        cfg,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let data_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| cli.out_dir.clone());
    match &cli.command {
        Command::Gen => {
            gen(&mut run)?;
            run.finish("gen")
        }
        Command::Build { data_dir: d } => {
            build(&mut run, &data_dir(d))?;
            run.finish("build")
        }
        Command::Train {
            stage,
            checkpoint,
            allow_cold_start,
            data_dir: d,
        } => {
            train(&mut run, &data_dir(d), *stage, checkpoint.as_deref(), *allow_cold_start)?;
            run.finish("train")
        }
        Command::Eval {
            checkpoint,
            k,
            data_dir: d,
        } => {
            eval(&mut run, &data_dir(d), checkpoint, k)?;
            run.finish("eval")
        }
        Command::Predict {
            checkpoint,
            record,
            data_dir: d,
        } => {
            predict(&mut run, &data_dir(d), checkpoint, record)?;
            run.finish("predict")
        }
    }
}

fn gen(run: &mut Run) -> Result<()> {
    if let Some(s) = run.cli.seed {
        run.cfg.gen.seed = s;
    }
    let ont = generate_ontology(&run.cfg.gen)?;
    let records = generate_records(&run.cfg.gen, &ont)?;
    let p = run.cli.out_dir.join(ONTOLOGY);
    save_ontology(&ont, &p)?;
    run.outputs.push(p);
    let p = run.cli.out_dir.join(RECORDS);
    save_records(&records, &p)?;
    run.outputs.push(p);
    println!("generated {} codes, {} patients", ont.len(), records.len());
    Ok(())
}

fn records_text(records: &[PatientRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    dxrank_core::synthgen::write_records(records, &mut buf)?;
    Ok(buf)
}

fn build(run: &mut Run, data: &Path) -> Result<()> {
    if let Some(s) = run.cli.seed {
        run.cfg.data.split_seed = s;
        run.cfg.data.perturb_seed = s;
    }
    let ont = load_ontology(run.input(data, ONTOLOGY))?;
    let records = load_records(run.input(data, RECORDS), &ont)?;
    let (train, dev, test) = split_by_patient(&records, run.cfg.data.split, run.cfg.data.split_seed)?;
    let vocab = build_vocabulary(&ont, &run.cfg.data.instruction)?;
    let mem = memorization_pairs(&ont, &vocab)?;
    let diag = diagnosis_instances(&train, &ont, &vocab, &run.cfg.corpus())?;

    if data != run.cli.out_dir {
        run.write(ONTOLOGY, ont.to_table())?;
    }
    run.write(VOCAB, vocab.to_tsv())?;
    run.write(TRAIN, records_text(&train)?)?;
    run.write(DEV, records_text(&dev)?)?;
    run.write(TEST, records_text(&test)?)?;
    run.write(MEMORIZE, write_instances(&mem, &ont)?)?;
    run.write(DIAGNOSE, write_instances(&diag, &ont)?)?;
    println!(
        "split {}/{}/{} patients; {} memorization and {} diagnosis instances",
        train.len(),
        dev.len(),
        test.len(),
        mem.len(),
        diag.len()
    );
    Ok(())
}

fn load_data(run: &mut Run, data: &Path) -> Result<(Ontology, Vocabulary)> {
    let ont = load_ontology(run.input(data, ONTOLOGY))?;
    let vp = run.input(data, VOCAB);
    let text = fs::read_to_string(&vp).map_err(|e| Error::io(&vp, e))?;
    let vocab = Vocabulary::from_tsv(&text)?;
    vocab.check_ontology(&ont)?;
    Ok((ont, vocab))
}

fn load_checkpoint(run: &mut Run, path: &Path, vocab: &Vocabulary) -> Result<ModelCheckpoint> {
    run.inputs.push(path.to_path_buf());
    let ck = ModelCheckpoint::load(path)?;
    if &ck.vocab != vocab {
        return Err(Error::Invalid(format!(
            "checkpoint {} was trained with a different vocabulary",
            path.display()
        )));
    }
    Ok(ck)
}

fn eval_config(cfg: &PipelineConfig, ont: &Ontology, ks: Option<Vec<usize>>) -> EvalConfig {
    let mut e = cfg.eval_config(ks);
    // Only synthetic ontologies carry a designated target group.
    e.target_group = target_group(&cfg.gen, ont).ok();
    e
}

fn train(run: &mut Run, data: &Path, stage: StageArg, checkpoint: Option<&Path>, cold: bool) -> Result<()> {
    let (ont, vocab) = load_data(run, data)?;
    let stage = match stage {
        StageArg::Memorize => Stage::Memorize,
        StageArg::Diagnose => Stage::Diagnose,
    };
    let mut tc = run.cfg.train_for(stage)?;
    if let Some(s) = run.cli.seed {
        tc.seed = s;
        run.cfg.model.init_seed = s;
    }
    let ck = match checkpoint {
        Some(p) => {
            let ck = load_checkpoint(run, p, &vocab)?;
            if stage == Stage::Diagnose && !ck.has_stage(STAGE_MEMORIZE) && !cold {
                return Err(Error::Invalid(format!(
                    "{} has not been through the memorization stage (use --allow-cold-start to override)",
                    p.display()
                )));
            }
            ck
        }
        None if stage == Stage::Diagnose && !cold => {
            return Err(Error::Invalid(
                "the diagnosis stage needs --checkpoint from the memorization stage, or --allow-cold-start".into(),
            ))
        }
        None => ModelCheckpoint::new(Transformer::new(run.cfg.model_for(vocab.len())?)?, vocab.clone())?,
    };

    let (name, out) = match stage {
        Stage::Memorize => {
            let mem = load_instances(run.input(data, MEMORIZE), &ont, &vocab)?;
            ("memorize", train_memorize(&tc, ck, &ont, &mem)?)
        }
        Stage::Diagnose => {
            let diag = load_instances(run.input(data, DIAGNOSE), &ont, &vocab)?;
            let dev = load_records(run.input(data, DEV), &ont)?;
            let ev = eval_config(&run.cfg, &ont, None);
            ("diagnose", train_diagnosis_stage(&tc, ck, &ont, &diag, &dev, &ev)?)
        }
    };
    let ckpt = run.cli.out_dir.join(format!("{name}.ckpt"));
    out.checkpoint.save(&ckpt)?;
    run.outputs.push(ckpt);
    run.write(&format!("{name}_history.csv"), out.history.to_csv())?;
    println!(
        "{name}: {} epochs, best epoch {} (dev metric {:.4})",
        out.epochs_run, out.best_epoch, out.best_metric
    );
    Ok(())
}

fn eval(run: &mut Run, data: &Path, checkpoint: &Path, ks: &[usize]) -> Result<()> {
    let (ont, vocab) = load_data(run, data)?;
    let ck = load_checkpoint(run, checkpoint, &vocab)?;
    let dev = load_records(run.input(data, DEV), &ont)?;
    let test = load_records(run.input(data, TEST), &ont)?;
    let mut ev = eval_config(&run.cfg, &ont, Some(ks.to_vec()));
    let dev_out = evaluate(&ck, &ont, &vocab, &dev, &ev)?;
    ev.hf_threshold = dev_out.report.hf_threshold;
    let test_out = evaluate(&ck, &ont, &vocab, &test, &ev)?;
    dev_out.report.check()?;
    test_out.report.check()?;

    let mut csv = format!("{CSV_HEADER}\n");
    csv += &dev_out.report.csv_rows("final", "dev");
    csv += &test_out.report.csv_rows("final", "test");
    run.write("eval_metrics.csv", csv)?;
    let text = dev_out.report.to_text("dev") + "\n" + &test_out.report.to_text("test");
    run.write("eval_report.txt", &text)?;
    let mut lines = String::new();
    for p in &test_out.predictions {
        lines += &serde_json::to_string(p)?;
        lines.push('\n');
    }
    run.write("predictions.jsonl", lines)?;
    print!("{text}");
    if test_out.truncated > 0 {
        eprintln!("note: {} test histories were shortened to fit max_seq_len", test_out.truncated);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PredictOutput {
    patient_id: String,
    predicted: Vec<CodeId>,
    terminated_by_eov: bool,
    /// Oldest visits dropped to fit the model's context.
    truncated_visits: usize,
    hf_score: Option<f64>,
}

fn predict(run: &mut Run, data: &Path, checkpoint: &Path, record: &Path) -> Result<()> {
    let ont = load_ontology(run.input(data, ONTOLOGY))?;
    run.inputs.push(record.to_path_buf());
    let ck = ModelCheckpoint::load(checkpoint)?;
    run.inputs.push(checkpoint.to_path_buf());
    ck.vocab.check_ontology(&ont)?;
    let text = fs::read_to_string(record).map_err(|e| Error::io(record, e))?;
    let rec: PatientRecord = serde_json::from_str(text.trim())?;
    if rec.visits.is_empty() {
        return Err(Error::Invalid(format!("patient {} has no visits", rec.patient_id)));
    }
    for v in &rec.visits {
        for c in v.codes() {
            ont.leaf_index(c.as_str())?;
        }
    }
    let ev = eval_config(&run.cfg, &ont, None);
    let (ids, dropped) = fit_history(&rec.visits, &ev.instruction, &ck.vocab, ck.model.config().max_seq_len, ev.reserve)?;
    let set = decode(&ck, &ids, ev.max_steps, true)?;
    let hf_score = match &ev.target_group {
        Some(g) => {
            let first = &set.per_step_dists.as_ref().expect("kept")[0];
            Some(group_mass(first, ont.member_indices(g.level, g.index)?))
        }
        None => None,
    };
    let out = PredictOutput {
        patient_id: rec.patient_id.clone(),
        predicted: set.codes(&ont),
        terminated_by_eov: set.terminated_by_eov,
        truncated_visits: dropped,
        hf_score,
    };
    let json = serde_json::to_string(&out)?;
    run.write("prediction.json", format!("{json}\n"))?;
    println!("{json}");
    Ok(())
}
