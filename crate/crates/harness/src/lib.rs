//! Training, evaluation and experiment runners.

pub mod config;
pub mod experiments;
pub mod losses;
pub mod train;
