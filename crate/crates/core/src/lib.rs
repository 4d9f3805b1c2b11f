//! Multilingual unsupervised machine translation trained in three stages:
//! MASS pre-training with auxiliary parallel data, offline back-translation
//! rounds, and on-the-fly back-translation with cross-translation.
//!
//! Everything runs in-process on the CPU: a small reverse-mode autodiff engine
//! ([`tensor`]), a BPE subword model ([`tokenizer`]), dataset sampling
//! ([`corpus`]), a transformer encoder-decoder with per-language decoder
//! conditioning ([`model`]), the training objectives ([`objectives`]), the
//! stage orchestration ([`pipeline`]), BLEU scoring ([`eval`]) and a toy
//! language generator with an exact translation oracle ([`synthlang`]).

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod synthlang;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
