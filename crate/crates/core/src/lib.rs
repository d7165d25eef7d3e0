//! Quadruplet tokenization of clinical event streams, a time-aware BERT
//! encoder with masked language-value pre-training, and fine-tuning with
//! cross-validated evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod embedder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod ingest;
pub mod io_util;
pub mod metrics;
pub mod mlvm;
pub mod objective;
pub mod optim;
pub mod synth;
pub mod text_embed;
pub mod tokenizer;
pub mod train;
pub mod types;

pub use error::{Error, Result};
