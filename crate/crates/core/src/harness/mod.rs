//! Training, evaluation, gradient-flow audit, memory comparison and ablations.

pub mod ablate;
pub mod assembly;
pub mod audit;
pub mod check;
pub mod experiment;
pub mod optim;
pub mod train;

pub use ablate::{ablate, AblationAxis, AblationRow};
pub use assembly::{Assembly, Output, Prediction};
pub use audit::{compare_memory, depth_sweep, gradient_flow_audit, AuditReport, MemoryComparison, TopologyCost};
pub use check::assembly_gradcheck;
pub use experiment::{dataset, datasets, run};
pub use optim::Adam;
pub use train::{evaluate, train, EpochRecord, RunReport};
