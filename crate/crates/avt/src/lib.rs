//! Desk-scale anticipative video modeling: a causal masked transformer head
//! over per-frame encoder features, trained to predict the next action while
//! regressing future frame features, with evaluation, autoregressive rollout,
//! and attention-map export.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod train;
