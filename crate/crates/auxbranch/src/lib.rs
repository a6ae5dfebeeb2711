//! Toy end-to-end speech translation with an auxiliary text-like branch.
//!
//! The crate trains a small transformer speech translator in three stages
//! (ASR pre-training with a CTC head, MT pre-training, ST fine-tuning) on a
//! synthetic corpus. During fine-tuning the CTC-shrunk speech sequence is
//! duplicated into an auxiliary branch whose positions are probabilistically
//! replaced by source-token embeddings, and the two branches are tied by a
//! consistency loss. Everything runs on a hand-rolled reverse-mode
//! differentiation substrate that is validated end to end by a
//! finite-difference gradient checker.

pub mod bleu;
pub mod branch;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod corpus;
pub mod ctc;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor2D};
