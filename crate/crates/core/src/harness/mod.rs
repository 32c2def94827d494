//! Cooperative-localization harness: scenario generation, simulation,
//! export and run-level diagnostics.

pub mod config;
pub mod diagnose;
pub mod export;
pub mod scenario;
pub mod sim;

pub use config::ScenarioConfig;
pub use diagnose::{analyze, sweep, with_param, AnalysisOptions, AnalysisReport, SweepRow};
pub use export::{export, read_trace_csv, Summary};
pub use scenario::{generate_scenario, Scenario};
pub use sim::{run, run_scenario, run_with_probe, SimTrace, Simulation, StepProbe, TraceRow};
