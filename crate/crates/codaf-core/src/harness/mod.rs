//! Everything around the model: run configuration, the training loop,
//! checkpoints, metric logs, the verification suite, controlled
//! experiments and plotting.

pub mod ablate;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod plot;
pub mod train;
