//! Universal image restoration with a frozen base network, one low-rank
//! adapter set per degradation type, and a degradation-aware router that
//! composes adapters by Top-K similarity.

pub mod checkpoint;
pub mod config;
pub mod degradations;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod restorer;
pub mod router;
pub mod seed;

pub use error::{Error, Result};
pub use numerics::{GradTape, Tensor, Var};
