//! Plate-recognition orchestration around an opaque visual-question backend.
//!
//! The crate covers the full loop: multi-task dispatch, parsing, confidence
//! routing, human corrections, replay-based retraining, gated deployment and
//! a closed-loop simulator driving all of it.

// `!(x >= 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod confidence;
pub mod config;
pub mod gate;
pub mod hitl;
pub mod metrics;
pub mod parser;
pub mod pipeline;
pub mod replay;
pub mod sim;
pub mod store;
pub mod vqa;
