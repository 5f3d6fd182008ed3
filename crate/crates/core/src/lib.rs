//! Slot-format constrained structured generation.
//!
//! The crate turns a task output format such as
//! `<SOURCE> <;> instance of <;> tagset </>` into per-slot token masks, drives
//! a small state machine over those masks during greedy decoding, computes
//! the format-aware training losses with analytic gradients, and scores
//! generated outputs for format errors, micro-F1 and joint accuracy.

pub mod format;
pub mod losses;
pub mod mask;
pub mod matrix;
pub mod vocab;
pub mod decoder;
pub mod eval;
pub mod data;
pub mod toylm;
pub mod experiment;
