//! Batch entry points: dataset generation, training, evaluation,
//! generation and the verification suites.

pub mod check;
pub mod config;
pub mod error;
pub mod eval;
pub mod gen_data;
pub mod generate;
pub mod metrics;
pub mod task;
pub mod train;
