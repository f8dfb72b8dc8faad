//! Joint speech-text encoder pre-training at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: arrays and the reverse-mode engine everything else runs on
//! - [`nn`]: Conformer layers, attention and positional encodings
//! - [`model`]: speech, text and shared encoders plus quantizer and heads
//! - [`objectives`]: mask samplers and the BERT, w2v-BERT, TLM and STM losses
//! - [`trainer`]: mixed-batch steps, optimizer, stage schedule, checkpoints
//! - [`data`]: synthetic paired corpus, tokenizer, batching and file I/O
//! - [`eval`]: gradient-check suite and the downstream probes

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SlamError};
