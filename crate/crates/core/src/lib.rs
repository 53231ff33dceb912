//! Desk-scale neural machine translation with rapid unsupervised domain
//! adaptation: masked span pretraining, online back-translation and joint
//! supervised/unsupervised training stages, run on synthetic cipher languages.

pub mod autodiff;
pub mod data_synth;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod schedule;
pub mod tokenizer;

pub use error::{Error, Result};
