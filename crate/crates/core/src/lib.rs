//! Knowledge-aware autoregressive language modelling at desk scale.

pub mod autodiff;
pub mod cli;
pub mod dictionary;
pub mod evaluation;
pub mod experiment;
pub mod kv;
pub mod model;
pub mod pretraining;
pub mod synthetic;
pub mod tokenizer;
