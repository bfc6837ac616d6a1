//! Meta-token learning over frozen transformer features.
//!
//! Learnable meta-tokens distill each frozen layer's tokens through
//! cross-attention plus a linear token-reduction pathway, and can be injected
//! back into multi-resolution visual features. Gradients never enter the
//! backbone, which the instrumented autodiff core verifies through its
//! retained-activation ledger.

pub mod backbone;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
mod kernels;
pub mod lcd;
pub mod ledger;
pub mod mti;
pub mod params;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result, TensorError};
pub use graph::{Gradients, Graph};
pub use ledger::MemoryLedger;
pub use params::{Binding, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::{NodeId, Precision, Tag, Tensor};
