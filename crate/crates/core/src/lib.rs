//! Boolean implication mining and implication-structured sparse networks.
//!
//! The pipeline: binarize features with StepMiner thresholds
//! ([`binarize`]), mine typed pairwise implications ([`mining`]), stack one
//! masked layer per mined implication set ([`builder`], [`network`]), train
//! ([`trainer`]) and read rules and relevance traces back out ([`explain`]).
//! [`evaluate`] runs the cross-validated protocol end to end.

pub mod binarize;
pub mod builder;
pub mod dataio;
pub mod error;
pub mod evaluate;
pub mod explain;
pub mod matrix;
pub mod mining;
pub mod network;
pub mod persist;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
