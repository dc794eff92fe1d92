//! Dual-branch micro-expression recognition.
//!
//! A global ResNet branch over the whole face and a local Inception branch
//! over five action-unit regions are fused by stacked CBAM attention and
//! classified into five merged emotion classes. Everything runs on a small
//! CPU autodiff engine in this crate.

use std::sync::atomic::{AtomicBool, Ordering};

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use model::{flops_estimate, param_count, Dbfem, DbfemNet, InputShape, ModelConfig, Scale, Variant};
pub use tensor::{Precision, Real, Tensor};

/// Number of facial regions fed to the local branch.
pub const NUM_REGIONS: usize = 5;

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enables batch-level parallelism inside convolutions. Off by default.
/// Reductions run in a fixed order, so results do not depend on this flag.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}
