//! Desk-scale laboratory for a hybrid sliding-window/global attention
//! language model and its training machinery.
//!
//! Everything in this crate is pure computation over `alloc` collections so it
//! builds under `#![no_std]`. File formats, JSON and the command line live in
//! the `desklab` companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod elo;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
