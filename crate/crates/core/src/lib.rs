//! Slot-level sequence tagger for in-game chat: stacked Bi-LSTM features, an
//! attention-residual global-context channel, a label-forcing emission prior,
//! and a linear-chain CRF, trained with plain SGD on a from-scratch
//! reverse-mode autodiff tape.
//!
//! The crate is organized bottom-up:
//!
//! * [`diffcore`] — dense f64 tensors and a single-use gradient tape
//! * [`corpus`] — utterance ingestion, vocabulary, label-count statistics
//! * [`embeddings`] — word-vector loading and trainable lookup
//! * [`model`] — the BRAR forward pass producing per-token emission scores
//! * [`crf`] — linear-chain scoring, forward algorithm, Viterbi, brute-force oracles
//! * [`trainer`] — SGD loop, model bundle serialization
//! * [`evalkit`] — token-level micro F1 with the O tag excluded
//! * [`selfcheck`] — embedded verification suite backing `brar selfcheck`

pub mod corpus;
pub mod crf;
pub mod diffcore;
pub mod embeddings;
pub mod evalkit;
pub mod model;
pub mod selfcheck;
pub mod trainer;



pub use diffcore::{DiffError, Gradients, Tape, Tensor};




