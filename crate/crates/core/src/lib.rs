//! Core algorithms for intent classification that stays robust under class
//! imbalance and speech-recognition errors.
//!
//! The crate is `no_std` (it needs `alloc`) and carries no IO. File formats,
//! the command line, and experiment orchestration live in the `speechify`
//! crate.
//!
//! Pipeline overview:
//!
//! * [`model`] is a BiGRU encoder with attention pooling and a tanh MLP
//!   classifier, with hand-written backward passes.
//! * [`losses`] holds the contrastive, mixup, pairwise and fine-tuning
//!   objectives together with their gradients.
//! * [`error_channel`] is a phoneme-confusion channel that turns clean text
//!   into plausible recognition hypotheses.
//! * [`training`] runs pair sampling, pairwise pretraining with
//!   hallucinated errors, and clean/errorful consistency fine-tuning.
//! * [`inference`] fuses a per-class nearest-neighbour distance with the
//!   classifier distribution.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod error;
pub mod math;

pub mod data;
pub mod error_channel;
pub mod inference;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
