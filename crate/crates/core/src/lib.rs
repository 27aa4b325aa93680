//! Next-visit diagnosis prediction with a small autoregressive transformer
//! trained on ontology-aware objectives.

pub mod config;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod ontology;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
