//! Distributed information-form observer with consensus-based correction
//! solvers and numerical stability diagnostics.

pub mod analysis;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod observer;
pub mod solvers;
pub mod topology;

pub use error::{Error, Result};
pub use model::{
    double_integrator, position_selector, AgentModel, AssumptionReport, InputSignal, LocalSensor,
    Measurements, NetworkModel, RelativeSensor, Schedule,
};
pub use topology::{DualLayout, DualSlot, SensingTopology, SlotKind};
pub use observer::{BlockSparseInfoMatrix, Forgetting, InfoContributions, InfoSource, ObserverState};
pub use solvers::{AdmmState, CorrectionResult, Corrector, SolverKind, SolverParams};
