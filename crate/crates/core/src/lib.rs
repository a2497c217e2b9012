//! Hybrid CTC/attention speech recognition with sememe knowledge.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors and a reverse-mode tape.
//! - [`lexicon`]: token/sememe vocabularies and the sememe lexicon file format.
//! - [`data`]: synthetic corpora, feature files, manifests, SpecAugment, batching.
//! - [`model`]: conformer encoder, CTC head, transformer decoder and the three
//!   sememe mechanisms (prediction head, embedding enhancement, sememe encoder).
//! - [`losses`]: CTC, label-smoothed cross-entropy, sememe BCE and the mixer.
//! - [`decoding`]: attention beam search, CTC greedy, CTC prefix beam search and
//!   attention rescoring.
//! - [`training`]: warmup schedule, Adam, clipping, accumulation, checkpoint averaging.
//! - [`eval`]: CER, long-tail split and binning, per-domain reports.
//! - [`config`]: the run configuration shared by the command-line front end.

pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod lexicon;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
