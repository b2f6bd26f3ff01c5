//! Neuron-abandoning attention flow for small sequential CNNs.
//!
//! A traced forward pass records activations, ReLU masks and pooling
//! indices. The backbone output is then pushed back through per-layer
//! inverses ([`nabp`]) while importance coefficients are cascaded backward
//! ([`attribution`]); their channelwise product gives one attention map per
//! layer ([`flow`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod cli;
pub mod error;
pub mod flow;
pub mod image;
pub mod model;
pub mod nabp;
pub mod par;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use par::Exec;
