//! Gated xLSTM emotion recognition in conversation.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] - dense tensors, define-by-run reverse-mode autodiff, Adam,
//!   and finite-difference gradient checking.
//! * [`corpus`] - dialogues, the GXEB embedding file format, interlocutor and
//!   context-window lookup, dialogue-level splits, synthetic conversations.
//! * [`xlstm`] - mLSTM / sLSTM cells and the stacked block encoder.
//! * [`gated`] - the 12-stream gated fusion model.
//! * [`ded`] - dialogical emotion decoding (shift model, ddCRP prior, beam
//!   search) plus an exhaustive reference decoder.
//! * [`harness`] - training, evaluation, ablations, checkpoints and reports.

pub mod corpus;
pub mod ded;
pub mod error;
pub mod gated;
pub mod harness;
pub mod numerics;
pub mod xlstm;

pub use corpus::{Corpus, Dialogue, EmotionLabel, StreamRef, SyntheticConfig, Utterance};
pub use error::{Error, Result};
pub use gated::{GatedModel, ModelConfig};
pub use numerics::{Graph, ParamStore, Tensor, Var};
