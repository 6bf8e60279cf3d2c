//! Concepts-to-sentence captioning with fusion and recurrent relational memory.
//!
//! The crate is organised bottom-up: [`numcore`] provides tensors and
//! reverse-mode differentiation; [`encoder`], [`fusion`] and [`memory`] are the
//! model blocks; [`seq2seq`] wires them into a decoder and reconstructor;
//! [`losses`] holds the training objectives; [`datakit`] generates and stores
//! synthetic data; [`harness`] runs the staged curriculum and evaluation.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod error;
pub mod datakit;
pub mod encoder;
pub mod fusion;
pub mod harness;
pub mod losses;
pub mod memory;
pub mod numcore;
pub mod seq2seq;

pub use error::{Error, Result};
