//! Sequential matched-pair allocation for two-arm experiments: the
//! allocation engine, combined estimators and tests, competitor designs,
//! simulation studies, historical replay and trial persistence.

pub mod competitors;
pub mod engine;
pub mod estimators;
pub mod inference;
pub mod numstat;
pub mod replay;
pub mod service;
pub mod simlab;

pub use engine::{AllocationDecision, Arm, EngineConfig, EngineError, Subject, TrialSplit, TrialState};
pub use estimators::{EffectEstimate, EstimateMethod, PairedSample, ReservoirSample};
pub use inference::{ExactOptions, TestMethod, TestResult};
pub use replay::{HistoricalRecord, ReplayOptions, ReplayReport};
pub use service::{TrialSpec, TrialStore};
pub use simlab::{Allocator, Scenario, ScenarioSpec, SimReport, TestKind};
