//! Federated fine-tuning of persona-conditioned dialogue models.
//!
//! A stacked-LSTM seq2seq model is pre-trained without speaker information,
//! then fine-tuned in a simulated federation where each client is one
//! speaker. Word embeddings and network weights are aggregated by the
//! server; each client's persona embedding stays on the client.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod federated;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
