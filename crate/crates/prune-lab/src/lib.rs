//! A laboratory for one-shot magnitude pruning on a small encoder-decoder
//! transformer trained on a synthetic speech-to-token task.
//!
//! The crate trains a deterministic toy model, measures first- and
//! second-order pruning sensitivity, sweeps sparsity over component and
//! layer-block selectors, and turns the measurements into per-component
//! sparsity allocations with full cost accounting.

pub mod allocation;
pub mod autodiff;
pub mod cli;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod pruning;
pub mod report;
pub mod sensitivity;
pub mod task;
