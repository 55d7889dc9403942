//! Desk-scale laboratory for reading words through printed envelope security
//! patterns, and for defeating that attack with a content-aware shader.
//!
//! The crate is organised bottom-up:
//!
//! * [`imagegen`] renders words, synthesises security patterns, composites
//!   them into through-the-envelope photographs and writes PGM datasets.
//! * [`autodiff`] is a small reverse-mode tensor engine.
//! * [`model`] is the convolutional encoder and two-layer attention decoder.
//! * [`training`] holds the loss, Adam, the training loop and gradient checks.
//! * [`lexicon`] does Levenshtein and confidence-weighted word correction.
//! * [`countermeasure`] builds content-aware shader layers.
//! * [`harness`] runs the train-pattern × test-pattern × correction ×
//!   countermeasure matrix and emits reports.

pub mod alphabet;
pub mod autodiff;
pub mod countermeasure;
mod error;
pub mod harness;
pub mod imagegen;
pub mod lexicon;
pub mod model;
pub mod rng;
pub mod training;

pub use alphabet::{Alphabet, ALPHABET_SIZE, PAD_INDEX};
pub use autodiff::{Scalar, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use imagegen::{ComposeParams, GrayImage, PatternKind, PatternSpec};
pub use model::{ModelConfig, ModelParams};
pub use rng::SplitMix64;
