//! Command-line pipeline around the fusion core: generate or load fidelity
//! tables, align them, train the residual network, build the fused database,
//! and score it.

pub mod commands;
pub mod config;
