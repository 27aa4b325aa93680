//! Fixtures shared by the benchmarks.

use dxrank_core::corpus::{build_vocabulary, diagnosis_instances, CorpusConfig, TrainingInstance, DEFAULT_INSTRUCTION};
use dxrank_core::model::{ModelCheckpoint, ModelConfig, Transformer};
use dxrank_core::ontology::Ontology;
use dxrank_core::synthgen::{generate_ontology, generate_records, GenConfig, PatientRecord};

pub struct Fixture {
    pub ontology: Ontology,
    pub records: Vec<PatientRecord>,
    pub instances: Vec<TrainingInstance>,
    pub checkpoint: ModelCheckpoint,
}

/// Default 200-leaf ontology, 40 patients, and an untrained model of width
/// `d_model`.
pub fn fixture(d_model: usize) -> Fixture {
    let gen = GenConfig {
        n_patients: 40,
        ..GenConfig::default()
    };
    let ontology = generate_ontology(&gen).expect("valid generator config");
    let records = generate_records(&gen, &ontology).expect("records");
    let vocab = build_vocabulary(&ontology, DEFAULT_INSTRUCTION).expect("vocabulary");
    let instances = diagnosis_instances(&records, &ontology, &vocab, &CorpusConfig::default()).expect("instances");
    let model = Transformer::new(ModelConfig {
        d_model,
        n_layers: 2,
        n_heads: 4,
        d_ff: 4 * d_model,
        max_seq_len: 256,
        vocab_size: vocab.len(),
        dropout: 0.0,
        init_seed: 1,
    })
    .expect("model");
    let checkpoint = ModelCheckpoint::new(model, vocab).expect("checkpoint");
    Fixture {
        ontology,
        records,
        instances,
        checkpoint,
    }
}
